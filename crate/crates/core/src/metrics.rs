//! Ranking metrics and their aggregation across seeds.

use std::fmt;

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {i} is NaN")));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Input(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, then runs of equal scores.
fn tie_blocks(scores: &[f64]) -> (Vec<usize>, Vec<std::ops::Range<usize>>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || scores[order[i]] != scores[order[start]] {
            blocks.push(start..i);
            start = i;
        }
    }
    (order, blocks)
}

/// Area under the ROC curve: the Mann–Whitney statistic with ties counted
/// as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let (order, blocks) = tie_blocks(scores);
    // Walk from the highest score; a negative in a block beats nothing below
    // it, ties with the block's positives count half.
    let mut wins = 0.0;
    let mut neg_below = neg as f64;
    for block in blocks {
        let p = order[block.clone()].iter().filter(|&&i| labels[i] == 1).count() as f64;
        let n = block.len() as f64 - p;
        neg_below -= n;
        wins += p * (neg_below + 0.5 * n);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision. Tied scores form one block: precision is taken at the
/// end of the block and credited to each positive in it.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let (order, blocks) = tie_blocks(scores);
    let mut tp = 0usize;
    let mut sum = 0.0;
    for block in blocks {
        let p = order[block.clone()].iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        sum += p as f64 * tp as f64 / block.end as f64;
    }
    Ok(sum / pos as f64)
}

/// Metrics of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub dataset: String,
    pub label_ratio: f64,
    pub config_hash: String,
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub label_ratio: f64,
    pub config_hash: String,
    pub runs: Vec<RunMetrics>,
    pub auroc: Summary,
    pub auprc: Summary,
}

pub fn aggregate(runs: &[RunMetrics]) -> Result<EvalReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Usage("cannot aggregate zero runs".into()))?;
    for r in runs {
        if r.dataset != first.dataset
            || r.config_hash != first.config_hash
            || r.label_ratio != first.label_ratio
        {
            return Err(Error::Usage(format!(
                "runs disagree on dataset or configuration: {}/{}/{} vs {}/{}/{}",
                first.dataset,
                first.label_ratio,
                first.config_hash,
                r.dataset,
                r.label_ratio,
                r.config_hash
            )));
        }
        for (name, v) in [("AUROC", r.auroc), ("AUPRC", r.auprc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("seed {} has {name} {v} outside [0, 1]", r.seed)));
            }
        }
    }
    let col = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    Ok(EvalReport {
        dataset: first.dataset.clone(),
        label_ratio: first.label_ratio,
        config_hash: first.config_hash.clone(),
        runs: runs.to_vec(),
        auroc: Summary::of(&col(|r| r.auroc)),
        auprc: Summary::of(&col(|r| r.auprc)),
    })
}

impl EvalReport {
    /// One row per seed, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,label_ratio,config_hash,seed,auroc,auprc\n");
        let prefix = format!("{},{},{}", self.dataset, self.label_ratio, self.config_hash);
        for r in &self.runs {
            out.push_str(&format!("{prefix},{},{},{}\n", r.seed, r.auroc, r.auprc));
        }
        out.push_str(&format!("{prefix},mean,{},{}\n", self.auroc.mean, self.auprc.mean));
        out.push_str(&format!("{prefix},std,{},{}\n", self.auroc.std, self.auprc.std));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}  label ratio {}  config {}",
            self.dataset, self.label_ratio, self.config_hash
        )?;
        writeln!(f, "{:>8}  {:>7}  {:>7}", "seed", "AUROC", "AUPRC")?;
        for r in &self.runs {
            writeln!(f, "{:>8}  {:>7.3}  {:>7.3}", r.seed, r.auroc, r.auprc)?;
        }
        writeln!(f, "{:>8}  {:>7.3}  {:>7.3}", "mean", self.auroc.mean, self.auprc.mean)?;
        write!(f, "{:>8}  {:>7.3}  {:>7.3}", "std", self.auroc.std, self.auprc.std)
    }
}
