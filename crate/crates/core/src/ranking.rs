//! Evaluation harness: rank correlations and selection metrics between
//! transferability scores and fine-tuned mAP, the subset stability protocol
//! and reproduction of the published score tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub model_id: String,
    pub score: f64,
    pub gt_map: f64,
}

impl RankRecord {
    pub fn new(model_id: impl Into<String>, score: f64, gt_map: f64) -> Self {
        Self {
            model_id: model_id.into(),
            score,
            gt_map,
        }
    }
}

fn check(records: &[RankRecord], min: usize, what: &str) -> Result<()> {
    if records.len() < min {
        return Err(Error::InvalidInput(format!(
            "{what} needs at least {min} records, got {}",
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite() || !r.gt_map.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite value for model '{}'", r.model_id)));
    }
    Ok(())
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean pairwise sign agreement; ties count zero.
pub fn kendall_tau_plain(records: &[RankRecord]) -> Result<f64> {
    check(records, 2, "kendall tau")?;
    let n = records.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += sgn(records[i].gt_map - records[j].gt_map) * sgn(records[i].score - records[j].score);
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

/// 0-based rank by descending ground truth; equal values keep input order.
pub fn gt_ranks(records: &[RankRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|a, b| records[*b].gt_map.total_cmp(&records[*a].gt_map));
    let mut rank = vec![0; records.len()];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Sign agreement with pair weight `1/(r_n+1) + 1/(r_m+1)` from the
/// ground-truth rank, normalized by the total weight.
pub fn kendall_tau_weighted(records: &[RankRecord]) -> Result<f64> {
    check(records, 2, "kendall tau")?;
    let rank = gt_ranks(records);
    let n = records.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let w = 1.0 / (rank[i] + 1) as f64 + 1.0 / (rank[j] + 1) as f64;
            num += w * sgn(records[i].gt_map - records[j].gt_map) * sgn(records[i].score - records[j].score);
            den += w;
        }
    }
    Ok(num / den)
}

/// One direction of the hyperbolic weighted tau: weights come from the rank
/// under `primary` (descending, `secondary` breaks ties).
fn hyperbolic_one_way(primary: &[f64], secondary: &[f64]) -> f64 {
    let n = primary.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        primary[*b]
            .total_cmp(&primary[*a])
            .then(secondary[*b].total_cmp(&secondary[*a]))
            .then(b.cmp(a))
    });
    let mut rank = vec![0usize; n];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r;
    }
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let w = 1.0 / (rank[i] + 1) as f64 + 1.0 / (rank[j] + 1) as f64;
            let sx = sgn(primary[i] - primary[j]);
            let sy = sgn(secondary[i] - secondary[j]);
            num += w * sx * sy;
            if sx != 0.0 {
                dx += w;
            }
            if sy != 0.0 {
                dy += w;
            }
        }
    }
    if dx == 0.0 || dy == 0.0 {
        return f64::NAN;
    }
    num / (dx * dy).sqrt()
}

/// Hyperbolically weighted tau with tie-corrected normalization, averaged over
/// weighting by the score ranking and by the ground-truth ranking.
pub fn kendall_tau_hyperbolic(records: &[RankRecord]) -> Result<f64> {
    check(records, 2, "kendall tau")?;
    let s: Vec<f64> = records.iter().map(|r| r.score).collect();
    let g: Vec<f64> = records.iter().map(|r| r.gt_map).collect();
    let tau = 0.5 * (hyperbolic_one_way(&s, &g) + hyperbolic_one_way(&g, &s));
    if tau.is_nan() {
        return Err(Error::InvalidInput("hyperbolic tau is undefined when all scores or all gt values tie".into()));
    }
    Ok(tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TauVariant {
    #[default]
    Plain,
    Weighted,
    Hyperbolic,
}

impl TauVariant {
    pub const ALL: [TauVariant; 3] = [TauVariant::Plain, TauVariant::Weighted, TauVariant::Hyperbolic];

    pub fn compute(self, records: &[RankRecord]) -> Result<f64> {
        match self {
            TauVariant::Plain => kendall_tau_plain(records),
            TauVariant::Weighted => kendall_tau_weighted(records),
            TauVariant::Hyperbolic => kendall_tau_hyperbolic(records),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TauVariant::Plain => "tauw-plain",
            TauVariant::Weighted => "tauw-weighted",
            TauVariant::Hyperbolic => "tauw-hyperbolic",
        }
    }
}

/// Index of the top-scored record; ties go to the smallest model id.
pub fn top_scored(records: &[RankRecord]) -> Option<usize> {
    (0..records.len()).reduce(|best, i| {
        let (a, b) = (&records[best], &records[i]);
        if b.score > a.score || (b.score == a.score && b.model_id < a.model_id) {
            i
        } else {
            best
        }
    })
}

/// mAP of the top-scored model over the best mAP in the zoo.
pub fn rel_at_1(records: &[RankRecord]) -> Result<f64> {
    check(records, 1, "rel@1")?;
    if let Some(r) = records.iter().find(|r| !(r.gt_map > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "rel@1 needs positive gt, model '{}' has {}",
            r.model_id, r.gt_map
        )));
    }
    let best = records.iter().map(|r| r.gt_map).fold(f64::NEG_INFINITY, f64::max);
    let top = top_scored(records).expect("non-empty");
    Ok(records[top].gt_map / best)
}

/// Whether the top-scored model attains the best ground truth.
pub fn selects_best(records: &[RankRecord]) -> bool {
    let best = records.iter().map(|r| r.gt_map).fold(f64::NEG_INFINITY, f64::max);
    top_scored(records).is_some_and(|i| records[i].gt_map == best)
}

pub fn recall_at_1(selected_best: &[bool]) -> Result<f64> {
    if selected_best.is_empty() {
        return Err(Error::InvalidInput("recall@1 needs at least one subset".into()));
    }
    Ok(selected_best.iter().filter(|b| **b).count() as f64 / selected_best.len() as f64)
}

/// Weighted Pearson correlation between scores and gt with weights `1/(r+1)`
/// from the gt rank, or uniform weights.
pub fn pearson_weighted(records: &[RankRecord], uniform: bool) -> Result<f64> {
    check(records, 3, "pearson")?;
    let w: Vec<f64> = if uniform {
        vec![1.0; records.len()]
    } else {
        gt_ranks(records).into_iter().map(|r| 1.0 / (r + 1) as f64).collect()
    };
    let total: f64 = w.iter().sum();
    let mean = |f: fn(&RankRecord) -> f64| records.iter().zip(&w).map(|(r, w)| w * f(r)).sum::<f64>() / total;
    let (ms, mg) = (mean(|r| r.score), mean(|r| r.gt_map));
    let (mut cov, mut vs, mut vg) = (0.0, 0.0, 0.0);
    for (r, w) in records.iter().zip(&w) {
        let (ds, dg) = (r.score - ms, r.gt_map - mg);
        cov += w * ds * dg;
        vs += w * ds * ds;
        vg += w * dg * dg;
    }
    if !(vs > 0.0) || !(vg > 0.0) {
        return Err(Error::InvalidInput("pearson correlation is undefined for zero variance".into()));
    }
    Ok((cov / (vs * vg).sqrt()).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Subset sampling

pub const MAX_ZOO: usize = 64;

/// Exact binomial coefficient, `None` on u64 overflow.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// A subset of at most 64 zoo indices, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset(pub u64);

impl Subset {
    pub fn from_indices(idx: &[usize]) -> Self {
        Subset(idx.iter().fold(0u64, |m, i| m | (1u64 << i)))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        i < 64 && self.0 >> i & 1 == 1
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(i)
        })
    }
}

/// Number of subsets drawn for a zoo of `n` with subsets of `k`.
pub fn subset_count(n: usize, k: usize, fraction: f64) -> Result<u64> {
    if n > MAX_ZOO {
        return Err(Error::InvalidInput(format!("zoo size {n} exceeds the supported {MAX_ZOO}")));
    }
    if k < 2 || k > n {
        return Err(Error::InvalidInput(format!("subset size must satisfy 2 <= k <= N, got k={k}, N={n}")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let total = binomial(n as u64, k as u64).expect("C(64, k) fits in u64");
    let count = (fraction * total as f64).ceil() as u64;
    if count > total {
        return Err(Error::InvalidInput(format!("{count} subsets requested but only C({n},{k})={total} exist")));
    }
    Ok(count.max(1))
}

/// The `rank`-th k-combination of `0..n` in lexicographic order.
pub fn unrank_combination(n: usize, k: usize, mut rank: u64) -> Subset {
    let mut mask = 0u64;
    let mut next = 0usize;
    for remaining in (1..=k).rev() {
        loop {
            let with = binomial((n - next - 1) as u64, (remaining - 1) as u64).expect("fits");
            if rank < with {
                mask |= 1 << next;
                next += 1;
                break;
            }
            rank -= with;
            next += 1;
        }
    }
    Subset(mask)
}

/// `ceil(fraction * C(n, k))` distinct k-subsets of `0..n`, drawn uniformly by
/// sampling distinct combination ranks (Floyd) and unranking them. Output is in
/// ascending rank order and depends only on the arguments.
pub fn sample_subsets(n: usize, k: usize, fraction: f64, seed: u64) -> Result<Vec<Subset>> {
    let count = subset_count(n, k, fraction)?;
    let total = binomial(n as u64, k as u64).expect("checked");
    let mut ranks: Vec<u64> = if count == total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = HashSet::with_capacity(count as usize);
        for j in total - count..total {
            let t = rng.random_range(0..=j);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().collect()
    };
    ranks.sort_unstable();
    Ok(ranks.into_par_iter().map(|r| unrank_combination(n, k, r)).collect())
}

// ---------------------------------------------------------------------------
// Score tables

/// Per-model metric columns plus a ground-truth column; missing values are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub columns: Vec<(String, Vec<Option<f64>>)>,
}

fn parse_cell(s: &str) -> Option<Option<f64>> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("n/a") || t.eq_ignore_ascii_case("na") || t == "-" {
        return Some(None);
    }
    t.parse::<f64>().ok().map(Some)
}

impl ScoreTable {
    /// Reads a CSV whose first column is the model id; every column whose cells all
    /// parse as numbers or N/A is kept, others are dropped.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers.len() < 2 {
            return Err(Error::Format("score table needs an id column and at least one value column".into()));
        }
        let mut ids = Vec::new();
        let mut raw: Vec<Vec<Option<Option<f64>>>> = vec![Vec::new(); headers.len() - 1];
        for row in rdr.records() {
            let row = row?;
            if row.len() != headers.len() {
                return Err(Error::Format(format!("row {} has {} fields", ids.len() + 1, row.len())));
            }
            ids.push(row[0].to_string());
            for (c, col) in raw.iter_mut().enumerate() {
                col.push(parse_cell(&row[c + 1]));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("duplicate model id '{dup}'")));
        }
        let columns = headers[1..]
            .iter()
            .zip(raw)
            .filter(|(_, v)| v.iter().all(Option::is_some))
            .map(|(h, v)| (h.clone(), v.into_iter().map(Option::unwrap).collect()))
            .collect();
        Ok(Self { ids, columns })
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.columns.iter().find(|(h, _)| h == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[Option<f64>]> {
        self.column(name)
            .ok_or_else(|| Error::Format(format!("missing numeric column '{name}'")))
    }

    /// Values of `column` for the given ids, in order.
    pub fn lookup(&self, ids: &[String], column: &str) -> Result<Vec<f64>> {
        let values = self.require(column)?;
        let index: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let missing: Vec<&str> = ids
            .iter()
            .filter(|id| !index.contains_key(id.as_str()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidInput(format!(
                "models missing from ground truth: {}",
                missing.join(", ")
            )));
        }
        ids.iter()
            .map(|id| {
                values[index[id.as_str()]]
                    .ok_or_else(|| Error::InvalidInput(format!("'{column}' is N/A for '{id}'")))
            })
            .collect()
    }

    /// Joins a score column with a ground-truth column of `gt` on model id.
    pub fn join(&self, score_column: &str, gt: &ScoreTable, gt_column: &str) -> Result<Vec<RankRecord>> {
        let scores = self.require(score_column)?;
        let truth = gt.lookup(&self.ids, gt_column)?;
        self.ids
            .iter()
            .zip(scores)
            .zip(truth)
            .map(|((id, s), g)| {
                let s = s.ok_or_else(|| Error::NotApplicable(format!("column '{score_column}' is N/A for '{id}'")))?;
                Ok(RankRecord::new(id.clone(), s, g))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMetric {
    Tau(TauVariant),
    Pearson,
    PearsonUniform,
    Rel1,
}

impl EvalMetric {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "tauw-plain" => EvalMetric::Tau(TauVariant::Plain),
            "tauw-weighted" => EvalMetric::Tau(TauVariant::Weighted),
            "tauw-hyperbolic" => EvalMetric::Tau(TauVariant::Hyperbolic),
            "pearson" => EvalMetric::Pearson,
            "pearson-uniform" => EvalMetric::PearsonUniform,
            "rel1" => EvalMetric::Rel1,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown metric '{other}' (expected tauw-plain, tauw-weighted, tauw-hyperbolic, pearson, pearson-uniform, rel1)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Tau(v) => v.name(),
            EvalMetric::Pearson => "pearson",
            EvalMetric::PearsonUniform => "pearson-uniform",
            EvalMetric::Rel1 => "rel1",
        }
    }

    pub fn compute(self, records: &[RankRecord]) -> Result<f64> {
        match self {
            EvalMetric::Tau(v) => v.compute(records),
            EvalMetric::Pearson => pearson_weighted(records, false),
            EvalMetric::PearsonUniform => pearson_weighted(records, true),
            EvalMetric::Rel1 => rel_at_1(records),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub score_column: String,
    pub metric: String,
    pub value: f64,
}

// ---------------------------------------------------------------------------
// Stability protocol

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStability {
    pub metric: String,
    pub mean_tauw: f64,
    pub std_tauw: f64,
    pub mean_rel1: f64,
    pub std_rel1: f64,
    pub recall1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub zoo_size: usize,
    pub subset_size: usize,
    pub num_subsets: u64,
    pub fraction: f64,
    pub seed: u64,
    pub variant: TauVariant,
    pub metrics: Vec<MetricStability>,
}

pub const STABILITY_COLUMNS: [&str; 5] = ["metric", "mean_tauw", "std_tauw", "mean_rel1", "std_rel1"];

const CHUNK: usize = 4096;

/// Pairwise concordance masks for the plain tau: for index `i`, bit `j > i` is set
/// in `pos[i]` when the pair agrees and in `neg[i]` when it disagrees.
struct PairMasks {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl PairMasks {
    fn new(scores: &[f64], gt: &[f64]) -> Self {
        let n = scores.len();
        let (mut pos, mut neg) = (vec![0u64; n], vec![0u64; n]);
        for i in 0..n {
            for j in i + 1..n {
                let s = sgn(gt[i] - gt[j]) * sgn(scores[i] - scores[j]);
                if s > 0.0 {
                    pos[i] |= 1 << j;
                } else if s < 0.0 {
                    neg[i] |= 1 << j;
                }
            }
        }
        Self { pos, neg }
    }

    fn tau(&self, subset: Subset) -> f64 {
        let k = subset.len();
        let mut s: i64 = 0;
        for i in subset.indices() {
            s += (self.pos[i] & subset.0).count_ones() as i64 - (self.neg[i] & subset.0).count_ones() as i64;
        }
        2.0 * s as f64 / (k * (k - 1)) as f64
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    tau: f64,
    tau2: f64,
    rel: f64,
    rel2: f64,
    hits: u64,
}

/// Evaluates every metric column of `scores` against `gt` over sampled
/// sub-zoos. Columns with any missing value are skipped.
pub fn stability(
    ids: &[String],
    metrics: &[(String, Vec<f64>)],
    gt: &[f64],
    subset_size: usize,
    fraction: f64,
    seed: u64,
    variant: TauVariant,
) -> Result<StabilityReport> {
    let n = ids.len();
    if gt.len() != n || metrics.iter().any(|(_, v)| v.len() != n) {
        return Err(Error::InvalidInput("metric columns differ in length from the model list".into()));
    }
    if let Some(g) = gt.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidInput(format!("ground truth must be positive and finite, got {g}")));
    }
    let subsets = sample_subsets(n, subset_size, fraction, seed)?;
    let masks: Vec<PairMasks> = metrics.iter().map(|(_, s)| PairMasks::new(s, gt)).collect();

    let eval_subset = |subset: Subset, m: usize, acc: &mut Moments| -> Result<()> {
        let scores = &metrics[m].1;
        let tau = if variant == TauVariant::Plain {
            masks[m].tau(subset)
        } else {
            let recs: Vec<RankRecord> = subset
                .indices()
                .map(|i| RankRecord::new(ids[i].clone(), scores[i], gt[i]))
                .collect();
            variant.compute(&recs)?
        };
        let (mut top, mut best) = (usize::MAX, f64::NEG_INFINITY);
        for i in subset.indices() {
            best = best.max(gt[i]);
            if top == usize::MAX
                || scores[i] > scores[top]
                || (scores[i] == scores[top] && ids[i] < ids[top])
            {
                top = i;
            }
        }
        let rel = gt[top] / best;
        acc.tau += tau;
        acc.tau2 += tau * tau;
        acc.rel += rel;
        acc.rel2 += rel * rel;
        acc.hits += u64::from(gt[top] == best);
        Ok(())
    };

    let partials: Vec<Vec<Moments>> = subsets
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![Moments::default(); metrics.len()];
            for s in chunk {
                for (m, a) in acc.iter_mut().enumerate() {
                    eval_subset(*s, m, a)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let count = subsets.len() as f64;
    let mut out = Vec::with_capacity(metrics.len());
    for (m, (name, _)) in metrics.iter().enumerate() {
        let mut t = Moments::default();
        for p in &partials {
            t.tau += p[m].tau;
            t.tau2 += p[m].tau2;
            t.rel += p[m].rel;
            t.rel2 += p[m].rel2;
            t.hits += p[m].hits;
        }
        let mean_tau = t.tau / count;
        let mean_rel = t.rel / count;
        out.push(MetricStability {
            metric: name.clone(),
            mean_tauw: mean_tau,
            std_tauw: (t.tau2 / count - mean_tau * mean_tau).max(0.0).sqrt(),
            mean_rel1: mean_rel,
            std_rel1: (t.rel2 / count - mean_rel * mean_rel).max(0.0).sqrt(),
            recall1: t.hits as f64 / count,
        });
    }
    Ok(StabilityReport {
        zoo_size: n,
        subset_size,
        num_subsets: subsets.len() as u64,
        fraction,
        seed,
        variant,
        metrics: out,
    })
}

impl StabilityReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(STABILITY_COLUMNS)?;
        for m in &self.metrics {
            w.write_record([
                m.metric.clone(),
                format!("{:.6}", m.mean_tauw),
                format!("{:.6}", m.std_tauw),
                format!("{:.6}", m.mean_rel1),
                format!("{:.6}", m.std_rel1),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} subsets of {} from {} models (fraction {}, seed {}, {})\n",
            self.num_subsets,
            self.subset_size,
            self.zoo_size,
            self.fraction,
            self.seed,
            self.variant.name()
        );
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "{:<10} tau {:+.3} ± {:.3}  rel@1 {:.3} ± {:.3}  recall@1 {:.3}",
                m.metric, m.mean_tauw, m.std_tauw, m.mean_rel1, m.std_rel1, m.recall1
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Table reproduction

pub const FIXTURE_DATASETS: [(&str, &str); 6] = [
    ("pascal_voc", "Pascal VOC"),
    ("cityscapes", "CityScapes"),
    ("soda", "SODA"),
    ("crowdhuman", "CrowdHuman"),
    ("visdrone", "VisDrone"),
    ("deeplesion", "DeepLesion"),
];

pub const FIXTURE_METRICS: [&str; 6] = ["knas", "sfda", "logme", "ulogme", "iologme", "detlogme"];
pub const FIXTURE_COLUMNS: [&str; 9] = [
    "model", "backbone", "knas", "sfda", "logme", "ulogme", "iologme", "detlogme", "map",
];
pub const PRINTED_TAU_FILE: &str = "printed_tau.csv";
/// Allowed gap between recomputed plain tau and the printed value.
pub const PRINTED_TOLERANCE: f64 = 0.10;
/// Datasets per metric column that must fall within the tolerance.
pub const PRINTED_MIN_DATASETS: usize = 4;

/// `(dataset, better metric, worse metric)` orderings that must hold for the plain tau.
pub const ORDINAL_CHECKS: [(&str, &str, &str); 4] = [
    ("pascal_voc", "detlogme", "logme"),
    ("cityscapes", "detlogme", "logme"),
    ("soda", "iologme", "logme"),
    ("deeplesion", "ulogme", "iologme"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCell {
    pub metric: String,
    pub printed: Option<f64>,
    pub plain: Option<f64>,
    pub weighted: Option<f64>,
    pub hyperbolic: Option<f64>,
}

impl TauCell {
    pub fn deviation(&self) -> Option<f64> {
        Some(self.plain? - self.printed?)
    }

    pub fn within_tolerance(&self) -> Option<bool> {
        self.deviation().map(|d| d.abs() <= PRINTED_TOLERANCE + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub key: String,
    pub name: String,
    pub num_models: usize,
    pub cells: Vec<TauCell>,
}

impl DatasetReport {
    pub fn cell(&self, metric: &str) -> Option<&TauCell> {
        self.cells.iter().find(|c| c.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalCheck {
    pub dataset: String,
    pub better: String,
    pub worse: String,
    pub better_tau: f64,
    pub worse_tau: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceCheck {
    pub metric: String,
    pub within: usize,
    pub compared: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionReport {
    pub datasets: Vec<DatasetReport>,
    pub ordinal: Vec<OrdinalCheck>,
    pub tolerance: Vec<ToleranceCheck>,
}

/// Reads one appendix fixture and checks its schema.
pub fn read_fixture(path: &Path) -> Result<ScoreTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let missing: Vec<&str> = FIXTURE_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("{}: missing columns {}", path.display(), missing.join(", "))));
    }
    drop(rdr);
    let table = ScoreTable::read_csv(path)?;
    if table.ids.len() < 2 {
        return Err(Error::Format(format!("{}: fewer than 2 models", path.display())));
    }
    for c in FIXTURE_METRICS.iter().chain(std::iter::once(&"map")) {
        table
            .require(c)
            .map_err(|_| Error::Format(format!("{}: column '{c}' has malformed values", path.display())))?;
    }
    Ok(table)
}

fn read_printed(dir: &Path) -> Result<BTreeMap<String, ScoreTableRow>> {
    let path = dir.join(PRINTED_TAU_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let t = ScoreTable::read_csv(&path)?;
    let mut out = BTreeMap::new();
    for (i, id) in t.ids.iter().enumerate() {
        let row = FIXTURE_METRICS
            .iter()
            .map(|m| (m.to_string(), t.column(m).and_then(|c| c[i])))
            .collect();
        out.insert(id.clone(), row);
    }
    Ok(out)
}

type ScoreTableRow = BTreeMap<String, Option<f64>>;

/// Recomputes every tau variant for each fixture table and compares the plain
/// tau against the printed values.
pub fn reproduce_tables(dir: &Path) -> Result<ReproductionReport> {
    let missing: Vec<String> = FIXTURE_DATASETS
        .iter()
        .map(|(k, _)| format!("{k}.csv"))
        .filter(|f| !dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing fixtures: {}", missing.join(", ")),
            ),
        });
    }
    let printed = read_printed(dir)?;
    let mut datasets = Vec::new();
    for (key, name) in FIXTURE_DATASETS {
        let table = read_fixture(&dir.join(format!("{key}.csv")))?;
        let mut cells = Vec::new();
        for metric in FIXTURE_METRICS {
            let printed_value = printed.get(key).and_then(|r| r.get(metric).copied().flatten());
            let (plain, weighted, hyperbolic) = match table.join(metric, &table, "map") {
                Ok(recs) => (
                    kendall_tau_plain(&recs).ok(),
                    kendall_tau_weighted(&recs).ok(),
                    kendall_tau_hyperbolic(&recs).ok(),
                ),
                Err(Error::NotApplicable(_)) => (None, None, None),
                Err(e) => return Err(e),
            };
            cells.push(TauCell {
                metric: metric.to_string(),
                printed: printed_value,
                plain,
                weighted,
                hyperbolic,
            });
        }
        datasets.push(DatasetReport {
            key: key.to_string(),
            name: name.to_string(),
            num_models: table.ids.len(),
            cells,
        });
    }

    let ordinal = ORDINAL_CHECKS
        .iter()
        .map(|(ds, better, worse)| {
            let d = datasets.iter().find(|d| d.key == *ds).expect("known dataset");
            let b = d.cell(better).and_then(|c| c.plain).unwrap_or(f64::NAN);
            let w = d.cell(worse).and_then(|c| c.plain).unwrap_or(f64::NAN);
            OrdinalCheck {
                dataset: ds.to_string(),
                better: better.to_string(),
                worse: worse.to_string(),
                better_tau: b,
                worse_tau: w,
                pass: b > w,
            }
        })
        .collect();

    let tolerance = FIXTURE_METRICS
        .iter()
        .map(|m| {
            let checks: Vec<bool> = datasets
                .iter()
                .filter_map(|d| d.cell(m).and_then(TauCell::within_tolerance))
                .collect();
            let within = checks.iter().filter(|b| **b).count();
            ToleranceCheck {
                metric: m.to_string(),
                within,
                compared: checks.len(),
                pass: within >= PRINTED_MIN_DATASETS,
            }
        })
        .collect();

    Ok(ReproductionReport {
        datasets,
        ordinal,
        tolerance,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.3}"))
}

impl ReproductionReport {
    pub fn ordinal_pass(&self) -> bool {
        self.ordinal.iter().all(|c| c.pass)
    }

    pub fn tolerance_pass(&self) -> bool {
        self.tolerance.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dataset",
            "metric",
            "printed",
            "tau_plain",
            "tau_weighted",
            "tau_hyperbolic",
            "deviation_plain",
            "within_tolerance",
        ])?;
        for d in &self.datasets {
            for c in &d.cells {
                w.write_record([
                    d.key.clone(),
                    c.metric.clone(),
                    fmt_opt(c.printed),
                    fmt_opt(c.plain),
                    fmt_opt(c.weighted),
                    fmt_opt(c.hyperbolic),
                    fmt_opt(c.deviation()),
                    c.within_tolerance().map_or("N/A".into(), |b| b.to_string()),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Ranking correlation reproduction\n\n");
        s.push_str("Each cell: printed / plain / rank-weighted / hyperbolic.\n\n");
        s.push_str("| dataset | ");
        s.push_str(&FIXTURE_METRICS.join(" | "));
        s.push_str(" |\n|---|");
        s.push_str(&"---|".repeat(FIXTURE_METRICS.len()));
        s.push('\n');
        for d in &self.datasets {
            let _ = write!(s, "| {} |", d.name);
            for c in &d.cells {
                if c.plain.is_none() {
                    s.push_str(" N/A |");
                } else {
                    let _ = write!(
                        s,
                        " {} / {} / {} / {} |",
                        fmt_opt(c.printed),
                        fmt_opt(c.plain),
                        fmt_opt(c.weighted),
                        fmt_opt(c.hyperbolic)
                    );
                }
            }
            s.push('\n');
        }
        s.push_str("\n## Ordinal checks (plain tau)\n\n");
        for c in &self.ordinal {
            let _ = writeln!(
                s,
                "- {}: {} {:.3} > {} {:.3}: {}",
                c.dataset,
                c.better,
                c.better_tau,
                c.worse,
                c.worse_tau,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        let _ = write!(
            s,
            "\n## Plain tau within ±{PRINTED_TOLERANCE:.2} of printed (need {PRINTED_MIN_DATASETS} datasets per metric)\n\n"
        );
        for c in &self.tolerance {
            let _ = writeln!(
                s,
                "- {}: {}/{}: {}",
                c.metric,
                c.within,
                c.compared,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        s.push_str("\n## Deviations beyond tolerance\n\n");
        for d in &self.datasets {
            for c in &d.cells {
                if c.within_tolerance() == Some(false) {
                    let _ = writeln!(
                        s,
                        "- {} {}: printed {} recomputed {} (deviation {:+.3})",
                        d.key,
                        c.metric,
                        fmt_opt(c.printed),
                        fmt_opt(c.plain),
                        c.deviation().unwrap_or(f64::NAN)
                    );
                }
            }
        }
        s
    }
}
