//! Fit, score, evaluate and calibrate a backdoor detector for one layer.
//!
//! A network's score is `sum_j log P(x_j)` over its layer's feature vectors,
//! i.e. the log of the product of per-vector likelihoods. Scores below the
//! calibrated threshold mark the network as backdoored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, CovarianceKind, GmmModel, SweepOptions, SweepResult};
use crate::par::Execution;
use crate::pca::{self, PcaModel, DEFAULT_RETAIN};
use crate::vectorize::{self, FeatureVectorSet, Interpretation};
use crate::weightstore::{Label, NetworkRecord};

/// Everything needed to reproduce a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub network_ids: Vec<String>,
    pub layer_shape: Vec<usize>,
    pub retain: f64,
    pub candidates: Vec<usize>,
    pub selected_components: usize,
    pub seed: u64,
    pub covariance_kind: CovarianceKind,
    pub max_iter: usize,
    pub tol: f64,
    /// `(n_components, aic)` for every evaluated candidate.
    pub sweep: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectorRepr", into = "DetectorRepr")]
pub struct DetectorModel {
    pub layer_name: String,
    pub interpretation: Interpretation,
    pub pca: PcaModel,
    pub gmm: GmmModel,
    pub threshold: Option<f64>,
    pub fit_manifest: FitManifest,
}

#[derive(Serialize, Deserialize)]
struct DetectorRepr {
    layer_name: String,
    interpretation: Interpretation,
    pca: PcaModel,
    gmm: GmmModel,
    threshold: Option<f64>,
    fit_manifest: FitManifest,
}

impl From<DetectorModel> for DetectorRepr {
    fn from(m: DetectorModel) -> Self {
        DetectorRepr {
            layer_name: m.layer_name,
            interpretation: m.interpretation,
            pca: m.pca,
            gmm: m.gmm,
            threshold: m.threshold,
            fit_manifest: m.fit_manifest,
        }
    }
}

impl TryFrom<DetectorRepr> for DetectorModel {
    type Error = Error;

    fn try_from(r: DetectorRepr) -> Result<Self> {
        let m = DetectorModel {
            layer_name: r.layer_name,
            interpretation: r.interpretation,
            pca: r.pca,
            gmm: r.gmm,
            threshold: r.threshold,
            fit_manifest: r.fit_manifest,
        };
        m.validate()?;
        Ok(m)
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        if self.gmm.dim() != self.pca.n_components() {
            return Err(Error::dim_mismatch(
                "GMM dimension vs PCA components",
                self.pca.n_components(),
                self.gmm.dim(),
            ));
        }
        if !self.fit_manifest.layer_shape.is_empty() {
            let (_, dim) = vectorize::vector_layout(&self.fit_manifest.layer_shape, self.interpretation)
                .ok_or_else(|| Error::validation("fit_manifest.layer_shape", "must be 2-D or 4-D"))?;
            if dim != self.pca.input_dim() {
                return Err(Error::dim_mismatch("PCA input vs layer shape", dim, self.pca.input_dim()));
            }
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::validation("threshold", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn is_in_sample(&self, network_id: &str) -> bool {
        self.fit_manifest.network_ids.iter().any(|id| id == network_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOptions {
    pub retain: f64,
    /// Component counts to sweep; `None` uses [`default_candidates`].
    pub candidates: Option<Vec<usize>>,
    pub seed: u64,
    pub covariance_kind: CovarianceKind,
    pub max_iter: usize,
    pub tol: f64,
    pub execution: Execution,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        let s = SweepOptions::default();
        DetectorOptions {
            retain: DEFAULT_RETAIN,
            candidates: None,
            seed: s.seed,
            covariance_kind: s.kind,
            max_iter: s.max_iter,
            tol: s.tol,
            execution: s.execution,
        }
    }
}

/// `{1, 2, 5, 10, 20, 50}` plus the layer's vector count under each
/// interpretation, sorted and deduplicated.
pub fn default_candidates(layer_shape: &[usize]) -> Vec<usize> {
    let mut c = vec![1, 2, 5, 10, 20, 50];
    match layer_shape {
        [r, cols] => c.extend([*cols, *r]),
        [o, ..] => c.push(*o),
        _ => {}
    }
    c.sort_unstable();
    c.dedup();
    c
}

/// Checks a fitting or calibration corpus: clean only, layer present, one shape.
fn check_clean_corpus<'a>(records: &'a [NetworkRecord], layer: &str) -> Result<Vec<usize>> {
    let mut shape: Option<&'a [usize]> = None;
    for r in records {
        if r.label != Label::Clean {
            return Err(Error::Contamination {
                network_id: r.network_id.clone(),
            });
        }
        let t = r.select_layer(layer)?;
        match shape {
            None => shape = Some(&t.shape),
            Some(s) if s != t.shape.as_slice() => {
                return Err(Error::CorpusInconsistency {
                    network_id: r.network_id.clone(),
                    message: format!("has layer `{layer}` of shape {:?}, expected {s:?}", t.shape),
                })
            }
            _ => {}
        }
    }
    Ok(shape.map(<[usize]>::to_vec).unwrap_or_default())
}

fn layer_vectors(record: &NetworkRecord, layer: &str, interp: Interpretation) -> Result<FeatureVectorSet> {
    vectorize::vectorize_layer(record.select_layer(layer)?, interp, &record.network_id)
}

/// Fits PCA and an AIC-selected mixture on the chosen layer of clean networks.
pub fn fit_detector(
    clean: &[NetworkRecord],
    layer_name: &str,
    interpretation: Interpretation,
    opts: &DetectorOptions,
) -> Result<DetectorModel> {
    fit_detector_with_sweep(clean, layer_name, interpretation, opts).map(|(m, _)| m)
}

/// Like [`fit_detector`], also returning every candidate fit from the sweep.
pub fn fit_detector_with_sweep(
    clean: &[NetworkRecord],
    layer_name: &str,
    interpretation: Interpretation,
    opts: &DetectorOptions,
) -> Result<(DetectorModel, SweepResult)> {
    if clean.len() < 2 {
        return Err(Error::InsufficientCorpus(format!(
            "need at least 2 clean networks to fit, found {}",
            clean.len()
        )));
    }
    let layer_shape = check_clean_corpus(clean, layer_name)?;
    let sets = clean
        .iter()
        .map(|r| layer_vectors(r, layer_name, interpretation))
        .collect::<Result<Vec<_>>>()?;
    let stacked = vectorize::stack_corpus(&sets)?;
    let pca = pca::fit_pca(&stacked, opts.retain)?;
    let reduced = pca::project(&pca, &stacked)?;

    let candidates = opts
        .candidates
        .clone()
        .unwrap_or_else(|| default_candidates(&layer_shape));
    let sweep = gmm::sweep_components(
        &reduced,
        &candidates,
        &SweepOptions {
            seed: opts.seed,
            kind: opts.covariance_kind,
            max_iter: opts.max_iter,
            tol: opts.tol,
            execution: opts.execution,
        },
    )?;
    let gmm = sweep.selected_model().clone();
    let model = DetectorModel {
        layer_name: layer_name.to_string(),
        interpretation,
        pca,
        gmm,
        threshold: None,
        fit_manifest: FitManifest {
            network_ids: clean.iter().map(|r| r.network_id.clone()).collect(),
            layer_shape,
            retain: opts.retain,
            candidates,
            selected_components: sweep.selected,
            seed: opts.seed,
            covariance_kind: opts.covariance_kind,
            max_iter: opts.max_iter,
            tol: opts.tol,
            sweep: sweep.candidates.iter().map(|e| (e.n_components, e.aic)).collect(),
        },
    };
    Ok((model, sweep))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScore {
    pub network_id: String,
    pub label: Label,
    pub log_score: f64,
    pub n_vectors: usize,
    pub verdict: Option<Label>,
}

/// Sum of per-vector log-densities.
///
/// The terms are sorted before summation so the result is bit-identical for
/// any ordering of the vectors.
pub fn score_vectors(model: &DetectorModel, vectors: &FeatureVectorSet) -> Result<f64> {
    if vectors.dim() != model.pca.input_dim() {
        return Err(Error::dim_mismatch("layer vectors", model.pca.input_dim(), vectors.dim()));
    }
    let mut terms = vectors
        .iter()
        .map(|x| model.gmm.log_density(&model.pca.project_one(x)))
        .collect::<Result<Vec<f64>>>()?;
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

pub fn verdict_for(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Clean
    } else {
        Label::Backdoored
    }
}

pub fn score_network(model: &DetectorModel, record: &NetworkRecord) -> Result<NetworkScore> {
    let t = record.select_layer(&model.layer_name)?;
    let expected = &model.fit_manifest.layer_shape;
    if !expected.is_empty() && &t.shape != expected {
        return Err(Error::CorpusInconsistency {
            network_id: record.network_id.clone(),
            message: format!(
                "has layer `{}` of shape {:?}, detector expects {expected:?}",
                t.name, t.shape
            ),
        });
    }
    let vectors = vectorize::vectorize_layer(t, model.interpretation, &record.network_id)?;
    let log_score = score_vectors(model, &vectors)?;
    if !log_score.is_finite() {
        return Err(Error::DegenerateData(format!(
            "network `{}` scored {log_score}",
            record.network_id
        )));
    }
    Ok(NetworkScore {
        network_id: record.network_id.clone(),
        label: record.label,
        log_score,
        n_vectors: vectors.len(),
        verdict: model.threshold.map(|t| verdict_for(log_score, t)),
    })
}

/// Scores many networks, in input order.
pub fn score_many(
    model: &DetectorModel,
    records: &[NetworkRecord],
    execution: Execution,
) -> Vec<Result<NetworkScore>> {
    execution.map(records, |_, r| score_network(model, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// `(false-positive rate, true-positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC with "backdoored" as the positive class and low scores predicting it.
///
/// The AUC is the Mann-Whitney statistic: the fraction of (backdoored, clean)
/// pairs where the backdoored network scores lower, ties counting half.
pub fn roc_from_scores(scores: &[(f64, Label)]) -> Result<RocResult> {
    let n_pos = scores.iter().filter(|s| s.1 == Label::Backdoored).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::SingleClass("clean"));
    }
    if n_neg == 0 {
        return Err(Error::SingleClass("backdoored"));
    }
    if let Some(s) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::DegenerateData(format!("non-finite score {}", s.0)));
    }
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = vec![(0.0, 0.0)];
    // Twice the Mann-Whitney U, kept integral.
    let mut twice_u: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            match sorted[j].1 {
                Label::Backdoored => gp += 1,
                Label::Clean => gn += 1,
            }
            j += 1;
        }
        // Positives in this group beat every negative not yet passed and tie
        // with the group's own negatives.
        twice_u += gp * (2 * (n_neg as u64 - fp - gn) + gn);
        tp += gp;
        fp += gn;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    let auc = twice_u as f64 / (2 * n_pos as u64 * n_neg as u64) as f64;
    Ok(RocResult { points, auc })
}

/// Trapezoidal area under a sequence of ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn evaluate(model: &DetectorModel, test: &[NetworkRecord]) -> Result<RocResult> {
    evaluate_with(model, test, Execution::default()).map(|(roc, _)| roc)
}

/// Scores every network and builds the ROC. Returns the scores alongside.
pub fn evaluate_with(
    model: &DetectorModel,
    test: &[NetworkRecord],
    execution: Execution,
) -> Result<(RocResult, Vec<NetworkScore>)> {
    if !test.iter().any(|r| r.label == Label::Clean) {
        return Err(Error::SingleClass("backdoored"));
    }
    if !test.iter().any(|r| r.label == Label::Backdoored) {
        return Err(Error::SingleClass("clean"));
    }
    let scores = score_many(model, test, execution)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, Label)> = scores.iter().map(|s| (s.log_score, s.label)).collect();
    Ok((roc_from_scores(&pairs)?, scores))
}

/// Largest `t` such that the fraction of `clean_scores` strictly below `t`
/// does not exceed `target_frr`.
pub fn threshold_for_frr(clean_scores: &[f64], target_frr: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target_frr) {
        return Err(Error::InvalidConfig(format!("target FRR must lie in [0, 1), got {target_frr}")));
    }
    if clean_scores.is_empty() {
        return Err(Error::InsufficientCorpus("no clean scores to calibrate on".into()));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let allowed = (target_frr * sorted.len() as f64).floor() as usize;
    Ok(sorted[allowed.min(sorted.len() - 1)])
}

/// Fraction of scores strictly below `threshold`.
pub fn rejection_rate(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|s| **s < threshold).count() as f64 / scores.len() as f64
}

pub fn calibrate_threshold(
    model: &DetectorModel,
    clean_holdout: &[NetworkRecord],
    target_frr: f64,
) -> Result<DetectorModel> {
    if clean_holdout.is_empty() {
        return Err(Error::InsufficientCorpus("calibration needs at least one clean network".into()));
    }
    check_clean_corpus(clean_holdout, &model.layer_name)?;
    let scores = score_many(model, clean_holdout, Execution::default())
        .into_iter()
        .map(|s| s.map(|s| s.log_score))
        .collect::<Result<Vec<_>>>()?;
    let threshold = threshold_for_frr(&scores, target_frr)?;
    Ok(DetectorModel {
        threshold: Some(threshold),
        ..model.clone()
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    network_id: String,
    label: String,
    log_score: Option<f64>,
    n_vectors: Option<usize>,
    verdict: String,
}

/// One row of a score report: a score, or the error that prevented one. The
/// label is unknown when the record itself could not be read.
pub type ScoreOutcome = (String, Option<Label>, std::result::Result<NetworkScore, String>);

/// Score report: `network_id,label,log_score,n_vectors,verdict`. Failed rows
/// leave the numeric columns empty and put `error` in the verdict column.
pub fn scores_to_csv(rows: &[ScoreOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, label, outcome) in rows {
        let row = match outcome {
            Ok(s) => ScoreRow {
                network_id: s.network_id.clone(),
                label: s.label.to_string(),
                log_score: Some(s.log_score),
                n_vectors: Some(s.n_vectors),
                verdict: s.verdict.map(|v| v.to_string()).unwrap_or_default(),
            },
            Err(_) => ScoreRow {
                network_id: id.clone(),
                label: label.map(|l| l.to_string()).unwrap_or_default(),
                log_score: None,
                n_vectors: None,
                verdict: "error".into(),
            },
        };
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// Reads back the successfully scored rows of a score report.
pub fn scores_from_csv(text: &str) -> Result<Vec<NetworkScore>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<ScoreRow>() {
        let row = row?;
        let (Some(log_score), Some(n_vectors)) = (row.log_score, row.n_vectors) else {
            continue;
        };
        out.push(NetworkScore {
            network_id: row.network_id,
            label: row.label.parse()?,
            log_score,
            n_vectors,
            verdict: if row.verdict.is_empty() {
                None
            } else {
                Some(row.verdict.parse()?)
            },
        });
    }
    Ok(out)
}

/// ROC report: `fpr,tpr` rows followed by `auc,<value>`.
pub fn roc_to_csv(roc: &RocResult) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (fpr, tpr) in &roc.points {
        s.push_str(&format!("{fpr},{tpr}\n"));
    }
    s.push_str(&format!("auc,{}\n", roc.auc));
    s
}

/// Sweep report: `n_components,aic`.
pub fn sweep_to_csv(manifest: &FitManifest) -> String {
    let mut s = String::from("n_components,aic\n");
    for (n, aic) in &manifest.sweep {
        s.push_str(&format!("{n},{aic}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightstore::WeightTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn lbl(scores: &[f64], label: Label) -> Vec<(f64, Label)> {
        scores.iter().map(|s| (*s, label)).collect()
    }

    #[test]
    fn perfect_and_null_auc() {
        let mut s = lbl(&[2.0, 3.0], Label::Clean);
        s.extend(lbl(&[0.0, 1.0], Label::Backdoored));
        let roc = roc_from_scores(&s).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));

        let mut s = lbl(&[1.0, 1.0, 1.0], Label::Clean);
        s.extend(lbl(&[1.0, 1.0], Label::Backdoored));
        assert_eq!(roc_from_scores(&s).unwrap().auc, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(roc_from_scores(&lbl(&[1.0, 2.0], Label::Clean)), Err(Error::SingleClass(_))));
    }

    #[test]
    fn auc_equals_trapezoid_and_is_transform_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s: Vec<(f64, Label)> = (0..30)
                .map(|i| {
                    let label = if i % 3 == 0 { Label::Backdoored } else { Label::Clean };
                    ((rng.random_range(0..8) as f64) * 0.5, label)
                })
                .collect();
            let roc = roc_from_scores(&s).unwrap();
            assert!((trapezoid_area(&roc.points) - roc.auc).abs() < 1e-12);
            assert!(roc.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            let transformed: Vec<(f64, Label)> = s.iter().map(|(v, l)| (v.exp() * 3.0 - 1.0, *l)).collect();
            assert_eq!(roc_from_scores(&transformed).unwrap().auc, roc.auc);
        }
    }

    #[test]
    fn frr_threshold_quantiles() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let t = threshold_for_frr(&scores, 0.1).unwrap();
        assert_eq!(t, 2.0);
        assert_eq!(rejection_rate(&scores, t), 0.1);
        assert_eq!(threshold_for_frr(&scores, 0.0).unwrap(), 1.0);
        assert_eq!(rejection_rate(&scores, 1.0), 0.0);
        assert!(threshold_for_frr(&scores, 1.0).is_err());
        assert!(threshold_for_frr(&[], 0.1).is_err());
    }

    #[test]
    fn verdicts_are_monotone_in_threshold() {
        let scores = [-5.0, -1.0, 0.0, 2.0];
        for s in scores {
            let mut was_clean = false;
            for t in [3.0, 1.0, 0.0, -2.0, -10.0] {
                let clean = verdict_for(s, t) == Label::Clean;
                assert!(!was_clean || clean);
                was_clean = clean;
            }
        }
    }

    fn identity_detector() -> DetectorModel {
        let pca = PcaModel::from_parts(vec![0.0], vec![vec![1.0]], vec![1.0], 0.95, 1.0).unwrap();
        let gmm = GmmModel::new(CovarianceKind::Diagonal, vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        DetectorModel {
            layer_name: "fc".into(),
            interpretation: Interpretation::Forward,
            pca,
            gmm,
            threshold: None,
            fit_manifest: FitManifest {
                network_ids: vec![],
                layer_shape: vec![],
                retain: 0.95,
                candidates: vec![1],
                selected_components: 1,
                seed: 0,
                covariance_kind: CovarianceKind::Diagonal,
                max_iter: 200,
                tol: 1e-6,
                sweep: vec![],
            },
        }
    }

    #[test]
    fn one_vector_standard_normal_score() {
        let set = FeatureVectorSet::from_flat(1, vec![0.0]).unwrap();
        let s = score_vectors(&identity_detector(), &set).unwrap();
        assert!((s - (-0.918_938_533_2)).abs() < 1e-10);
    }

    fn record(id: &str, label: Label, rng: &mut ChaCha8Rng, shape: [usize; 2]) -> NetworkRecord {
        let n = shape[0] * shape[1];
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut metadata = BTreeMap::new();
        if label == Label::Backdoored {
            metadata.insert(crate::weightstore::POISON_SPEC_KEY.into(), "p".into());
        }
        NetworkRecord {
            network_id: id.into(),
            label,
            tensors: vec![WeightTensor::new("fc", shape.to_vec(), data).unwrap()],
            metadata,
        }
    }

    #[test]
    fn fit_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = vec![record("a", Label::Clean, &mut rng, [4, 3])];
        let opts = DetectorOptions::default();
        assert!(matches!(
            fit_detector(&one, "fc", Interpretation::Forward, &opts),
            Err(Error::InsufficientCorpus(_))
        ));
        let mixed = vec![
            record("a", Label::Clean, &mut rng, [4, 3]),
            record("b", Label::Backdoored, &mut rng, [4, 3]),
        ];
        assert!(matches!(
            fit_detector(&mixed, "fc", Interpretation::Forward, &opts),
            Err(Error::Contamination { .. })
        ));
        let ragged = vec![
            record("a", Label::Clean, &mut rng, [4, 3]),
            record("b", Label::Clean, &mut rng, [4, 2]),
        ];
        assert!(matches!(
            fit_detector(&ragged, "fc", Interpretation::Forward, &opts),
            Err(Error::CorpusInconsistency { .. })
        ));
    }

    #[test]
    fn fit_score_save_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clean: Vec<_> = (0..6).map(|i| record(&format!("c{i}"), Label::Clean, &mut rng, [5, 4])).collect();
        let opts = DetectorOptions {
            candidates: Some(vec![1, 2, 3]),
            ..Default::default()
        };
        let m = fit_detector(&clean, "fc", Interpretation::Backward, &opts).unwrap();
        assert_eq!(m.gmm.dim(), m.pca.n_components());
        let best = m.fit_manifest.sweep.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(best, m.fit_manifest.selected_components);

        let again = fit_detector(&clean, "fc", Interpretation::Backward, &opts).unwrap();
        assert_eq!(m.to_json().unwrap(), again.to_json().unwrap());

        let back = DetectorModel::from_json(&m.to_json().unwrap()).unwrap();
        for r in &clean {
            let a = score_network(&m, r).unwrap();
            let b = score_network(&back, r).unwrap();
            assert_eq!(a.log_score.to_bits(), b.log_score.to_bits());
            assert_eq!(a.verdict, None);
        }

        let wrong = record("w", Label::Clean, &mut rng, [5, 3]);
        assert!(score_network(&m, &wrong).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let ok = NetworkScore {
            network_id: "n1".into(),
            label: Label::Backdoored,
            log_score: -12.345678901234567,
            n_vectors: 10,
            verdict: Some(Label::Backdoored),
        };
        let rows = vec![
            ("n1".to_string(), Some(Label::Backdoored), Ok(ok.clone())),
            ("n2".to_string(), Some(Label::Clean), Err("missing layer".to_string())),
            ("n3.wsc".to_string(), None, Err("truncated payload".to_string())),
        ];
        let text = scores_to_csv(&rows).unwrap();
        assert!(text.starts_with("network_id,label,log_score,n_vectors,verdict\n"));
        assert!(text.contains("n2,clean,,,error\n"));
        assert!(text.contains("n3.wsc,,,,error\n"));
        assert_eq!(scores_from_csv(&text).unwrap(), vec![ok]);
    }

    #[test]
    fn roc_csv_has_auc_footer() {
        let roc = RocResult { points: vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)], auc: 1.0 };
        let text = roc_to_csv(&roc);
        assert!(text.starts_with("fpr,tpr\n"));
        assert!(text.ends_with("auc,1\n"));
    }

    #[test]
    fn default_candidate_list() {
        assert_eq!(default_candidates(&[64, 10]), vec![1, 2, 5, 10, 20, 50, 64]);
        assert_eq!(default_candidates(&[512, 1792]), vec![1, 2, 5, 10, 20, 50, 512, 1792]);
    }
}
