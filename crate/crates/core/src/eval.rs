//! Retrieval, recall at full precision and lifelong summaries of the
//! performance matrix.
//!
//! `R[i][j]` is the recall on environment `j`'s test split using the
//! parameters obtained after training environment `i`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{classify_pair, Label, LabelRule};
use crate::model::{cosine_sim, forward_with, DescriptorModel};

/// Database entries with similarity at least `1 - epsilon`, most similar
/// first.
pub fn retrieve(query: &[f64], database: &[Vec<f64>], epsilon: f64) -> Result<Vec<(usize, f64)>> {
    if database.is_empty() {
        return Err(Error::InvalidArgument("retrieval database is empty".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let threshold = 1.0 - epsilon;
    let mut hits = Vec::new();
    for (i, d) in database.iter().enumerate() {
        let s = cosine_sim(query, d)?;
        if s >= threshold {
            hits.push((i, s));
        }
    }
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(hits)
}

/// Largest recall reachable by a threshold that accepts no false pair:
/// true pairs strictly above the best-scoring false pair over all true
/// pairs.
pub fn recall_at_full_precision(pairs: &[(f64, bool)]) -> Result<f64> {
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::UndefinedRecall);
    }
    let cut = pairs
        .iter()
        .filter(|p| !p.1)
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let above = pairs.iter().filter(|p| p.1 && p.0 > cut).count();
    Ok(above as f64 / positives as f64)
}

/// Per-query variant: a query counts as recalled when at least one of its
/// true matches scores strictly above every false pair of every query.
/// Queries without true matches are left out.
pub fn recall_per_query(queries: &[Vec<(f64, bool)>]) -> Result<f64> {
    let with_true: Vec<_> = queries.iter().filter(|q| q.iter().any(|p| p.1)).collect();
    if with_true.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    let cut = queries
        .iter()
        .flatten()
        .filter(|p| !p.1)
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let hit = with_true
        .iter()
        .filter(|q| q.iter().any(|p| p.1 && p.0 > cut))
        .count();
    Ok(hit as f64 / with_true.len() as f64)
}

/// Admissible, labeled pairs of one environment's test frames. Labels do
/// not depend on the model, so they are computed once.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub frames: Vec<Frame>,
    /// `(i, j, is_loop)` with `i < j`.
    pub pairs: Vec<(usize, usize, bool)>,
}

impl EvalSet {
    /// Pairs within `window` frames of each other in the same sequence, and
    /// ambiguous pairs, are not scored.
    pub fn new(frames: Vec<Frame>, rule: &LabelRule, window: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                let (a, b) = (&frames[i].meta, &frames[j].meta);
                if a.sequence == b.sequence && a.index.abs_diff(b.index) <= window {
                    continue;
                }
                match classify_pair(a, b, rule)? {
                    Label::Positive => pairs.push((i, j, true)),
                    Label::Negative => pairs.push((i, j, false)),
                    Label::Ambiguous => {}
                }
            }
        }
        Ok(Self { frames, pairs })
    }

    pub fn from_dataset(dataset: &Dataset, env: usize) -> Result<Self> {
        let spec = &dataset.manifest().environments[env];
        Self::new(
            dataset.test_frames(env)?,
            spec.eval_rule(),
            spec.eval_window(),
        )
    }

    pub fn descriptors(&self, model: &DescriptorModel, params: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.frames
            .iter()
            .map(|f| forward_with(model, params, &f.image))
            .collect()
    }

    pub fn score(&self, descriptors: &[Vec<f64>], per_query: bool) -> Result<f64> {
        let sim = |i: usize, j: usize| -> f64 {
            descriptors[i]
                .iter()
                .zip(&descriptors[j])
                .map(|(a, b)| a * b)
                .sum()
        };
        if per_query {
            let mut queries = vec![Vec::new(); self.frames.len()];
            for &(i, j, t) in &self.pairs {
                let s = sim(i, j);
                queries[i].push((s, t));
                queries[j].push((s, t));
            }
            recall_per_query(&queries)
        } else {
            let scored: Vec<_> = self.pairs.iter().map(|&(i, j, t)| (sim(i, j), t)).collect();
            recall_at_full_precision(&scored)
        }
    }

    /// Recall of the model with `params` on this set.
    pub fn evaluate(
        &self,
        model: &DescriptorModel,
        params: &[f64],
        per_query: bool,
    ) -> Result<f64> {
        self.score(&self.descriptors(model, params)?, per_query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub environments: Vec<String>,
    /// Row `i`: after training environment `i`; column `j`: tested on `j`.
    pub r: Vec<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn new(environments: Vec<String>, r: Vec<Vec<f64>>) -> Result<Self> {
        let t = environments.len();
        if t == 0 || r.len() != t || r.iter().any(|row| row.len() != t) {
            return Err(Error::DimensionMismatch(format!(
                "performance matrix must be {t}x{t}"
            )));
        }
        if let Some(v) = r.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "matrix entry {v} outside [0, 1]"
            )));
        }
        Ok(Self { environments, r })
    }

    pub fn size(&self) -> usize {
        self.environments.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["trained_on".to_string()];
        header.extend(self.environments.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.environments.iter().zip(&self.r) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let environments: Vec<String> = rd.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut r = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!(
                            "{}: row {}: `{v}` is not a number",
                            path.display(),
                            i + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            r.push(row);
        }
        Self::new(environments, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifelongSummary {
    pub ap: f64,
    /// Undefined for a single environment.
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

pub fn summarize(m: &PerformanceMatrix) -> LifelongSummary {
    let t = m.size();
    let r = &m.r;
    let lower: f64 = (0..t)
        .flat_map(|i| (0..=i).map(move |j| (i, j)))
        .map(|(i, j)| r[i][j])
        .sum();
    let ap = lower / (t * (t + 1) / 2) as f64;
    if t < 2 {
        return LifelongSummary {
            ap,
            bwt: None,
            fwt: None,
        };
    }
    let pairs = (t * (t - 1) / 2) as f64;
    let mut back = 0.0;
    let mut fwd = 0.0;
    for i in 0..t {
        for j in 0..t {
            if j < i {
                back += r[i][j] - r[j][j];
            } else if j > i {
                fwd += r[i][j];
            }
        }
    }
    LifelongSummary {
        ap,
        bwt: Some(back / pairs),
        fwt: Some(fwd / pairs),
    }
}

/// JSON report of a performance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub ap: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub environments: Vec<String>,
}

impl SummaryReport {
    pub fn new(m: &PerformanceMatrix) -> Self {
        let s = summarize(m);
        Self {
            ap: s.ap,
            bwt: s.bwt,
            fwt: s.fwt,
            matrix: m.r.clone(),
            environments: m.environments.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Evaluates each parameter vector (one per environment boundary, in order)
/// on every environment's test split.
pub fn build_performance_matrix(
    dataset: &Dataset,
    model: &DescriptorModel,
    boundary_params: &[Vec<f64>],
    per_query: bool,
) -> Result<PerformanceMatrix> {
    let t = dataset.num_environments();
    if boundary_params.len() != t {
        return Err(Error::MissingCheckpoint(format!(
            "{} boundary checkpoints for {t} environments",
            boundary_params.len()
        )));
    }
    let sets = (0..t)
        .map(|j| EvalSet::from_dataset(dataset, j))
        .collect::<Result<Vec<_>>>()?;
    let mut r = vec![vec![0.0; t]; t];
    for (i, params) in boundary_params.iter().enumerate() {
        for (j, set) in sets.iter().enumerate() {
            r[i][j] = set.evaluate(model, params, per_query)?;
        }
    }
    let names = dataset
        .manifest()
        .environments
        .iter()
        .map(|e| e.name.clone())
        .collect();
    PerformanceMatrix::new(names, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(r: Vec<Vec<f64>>) -> PerformanceMatrix {
        let names = (0..r.len()).map(|i| format!("e{i}")).collect();
        PerformanceMatrix::new(names, r).unwrap()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(
            recall_at_full_precision(&[(0.9, true), (0.8, true), (0.5, false)]).unwrap(),
            1.0
        );
        assert_eq!(
            recall_at_full_precision(&[(0.9, false), (0.8, true)]).unwrap(),
            0.0
        );
        assert_eq!(
            recall_at_full_precision(&[(0.7, true), (0.7, false), (0.9, true)]).unwrap(),
            0.5
        );
        assert!(matches!(
            recall_at_full_precision(&[(0.3, false)]),
            Err(Error::UndefinedRecall)
        ));
    }

    #[test]
    fn per_query_counts_queries() {
        let q = vec![
            vec![(0.9, true), (0.2, false)],
            vec![(0.4, true), (0.6, false)],
            vec![(0.1, false)],
        ];
        assert_eq!(recall_per_query(&q).unwrap(), 0.5);
    }

    #[test]
    fn retrieval_thresholds() {
        let angle = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        let db: Vec<_> = [0.0, 10.0, 45.0, 80.0, 120.0]
            .iter()
            .map(|&d| angle(d))
            .collect();
        let q = angle(0.0);
        let ids = |eps| {
            retrieve(&q, &db, eps)
                .unwrap()
                .into_iter()
                .map(|h| h.0)
                .collect::<Vec<_>>()
        };
        // cos 10 = 0.985, cos 45 = 0.707, cos 80 = 0.174, cos 120 = -0.5
        assert_eq!(ids(0.01), vec![0]);
        assert_eq!(ids(0.02), vec![0, 1]);
        assert_eq!(ids(0.3), vec![0, 1, 2]);
        assert_eq!(ids(1.0 - 1e-9), vec![0, 1, 2, 3]);
        assert!(retrieve(&q, &[], 0.1).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&matrix(vec![vec![0.8, 0.2], vec![0.6, 0.7]]));
        assert!((s.ap - 0.7).abs() < 1e-12);
        assert!((s.bwt.unwrap() + 0.2).abs() < 1e-12);
        assert!((s.fwt.unwrap() - 0.2).abs() < 1e-12);

        let c = summarize(&matrix(vec![vec![0.4; 3]; 3]));
        assert!(
            (c.ap - 0.4).abs() < 1e-12
                && c.bwt.unwrap().abs() < 1e-12
                && (c.fwt.unwrap() - 0.4).abs() < 1e-12
        );

        let id = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = summarize(&matrix(id));
        assert_eq!(s.bwt, Some(-1.0));
        assert_eq!(s.fwt, Some(0.0));
        assert_eq!(s.ap, 0.5);

        let single = summarize(&matrix(vec![vec![0.3]]));
        assert_eq!((single.ap, single.bwt, single.fwt), (0.3, None, None));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("R.csv");
        let m = matrix(vec![vec![0.1 + 0.2, 1.0 / 3.0], vec![0.0, 1.0]]);
        m.write_csv(&path).unwrap();
        assert_eq!(PerformanceMatrix::read_csv(&path).unwrap(), m);
    }

    fn pairs() -> impl Strategy<Value = Vec<(f64, bool)>> {
        prop::collection::vec((-1.0f64..1.0, any::<bool>()), 1..60)
            .prop_filter("needs a true pair", |v| v.iter().any(|p| p.1))
    }

    proptest! {
        #[test]
        fn recall_invariant_under_monotone_transform(p in pairs()) {
            let t: Vec<_> = p.iter().map(|&(s, l)| ((3.0 * s).exp() + 1.0, l)).collect();
            prop_assert_eq!(recall_at_full_precision(&p).unwrap(), recall_at_full_precision(&t).unwrap());
        }

        #[test]
        fn low_false_pair_changes_nothing(p in pairs()) {
            let mut q = p.clone();
            q.push((-2.0, false));
            prop_assert_eq!(recall_at_full_precision(&p).unwrap(), recall_at_full_precision(&q).unwrap());
        }

        #[test]
        fn summary_scales_linearly(r in prop::collection::vec(0.0f64..0.5, 9), alpha in 0.0f64..2.0) {
            let m = matrix(r.chunks(3).map(|c| c.to_vec()).collect());
            let scaled = matrix(m.r.iter().map(|row| row.iter().map(|v| v * alpha).collect()).collect());
            let (a, b) = (summarize(&m), summarize(&scaled));
            prop_assert!((b.ap - alpha * a.ap).abs() < 1e-12);
            prop_assert!((b.bwt.unwrap() - alpha * a.bwt.unwrap()).abs() < 1e-12);
            prop_assert!((b.fwt.unwrap() - alpha * a.fwt.unwrap()).abs() < 1e-12);
        }
    }
}
