//! The three-stage pipeline and the baselines it is compared against.
//!
//! Every trainer here sees training features and targets only. Ground-truth
//! attributes are read for validation-split model selection and, in
//! [`train_gt_gla`], as the oracle group labels.

use serde::{Deserialize, Serialize};

use crate::dataset::{inject_pseudo_label_noise, ClassProxyMatrix, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, select_model, EvalReport, TauPoint};
use crate::linalg::{Matrix, DEFAULT_PINV_TOL};
use crate::probe::{train, GroupPrior, LinearScorer, LossKind, TrainConfig, TrainView};
use crate::projection::ProjectionOperator;

/// Pseudo-attribute values per class: aligned with the biased model or not.
pub const PSEUDO_ATTRS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Jtt,
    Ppa,
    /// Projected biased model, no logit adjustment in the second stage.
    ProjOnly,
    /// Unprojected biased model, logit-adjusted second stage.
    GlaOnly,
    /// Logit-adjusted second stage on ground-truth groups.
    GtGla,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Erm,
        Method::Jtt,
        Method::Ppa,
        Method::ProjOnly,
        Method::GlaOnly,
        Method::GtGla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Jtt => "jtt",
            Method::Ppa => "ppa",
            Method::ProjOnly => "proj-only",
            Method::GlaOnly => "gla-only",
            Method::GtGla => "gt-gla",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Model whose training errors form the JTT error set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JttFirstStage {
    #[default]
    Erm,
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub tau: f64,
    /// Rescale every feature row to unit L2 norm before anything else.
    pub normalize: bool,
    /// Pseudo-counts added to every class/group when estimating priors.
    pub prior_smoothing: f64,
    pub pinv_tol: f64,
    /// Upweighting factor for the error set in the second JTT stage.
    pub jtt_lambda: f64,
    pub jtt_first_stage: JttFirstStage,
    /// Fraction of pseudo-group labels whose attribute is resampled.
    pub pseudo_noise: f64,
    pub noise_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            tau: 1.0,
            normalize: true,
            prior_smoothing: 1.0,
            pinv_tol: DEFAULT_PINV_TOL,
            jtt_lambda: 50.0,
            jtt_first_stage: JttFirstStage::Erm,
            pseudo_noise: 0.0,
            noise_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Recipe for the low-dimensional synthetic presets: unnormalized
    /// features, a larger constant-start learning rate and a short schedule.
    pub fn synthetic() -> Self {
        Self {
            train: TrainConfig {
                epochs: 15,
                learning_rate: 0.015,
                warmup_lr: 0.015,
                warmup_epochs: 0,
                ..TrainConfig::default()
            },
            normalize: false,
            ..Self::default()
        }
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Training-split view with optional row normalization applied to every split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: FeatureDataset,
    pub train_idx: Vec<usize>,
    pub train_x: Matrix<f64>,
    pub train_y: Vec<usize>,
}

impl PreparedData {
    pub fn new(ds: &FeatureDataset, z: &ClassProxyMatrix, normalize: bool) -> Result<Self> {
        z.check_compatible(ds)?;
        let dataset = if normalize { ds.l2_normalized() } else { ds.clone() };
        let train_idx = dataset.split_indices(Split::Train);
        if train_idx.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let train_x = dataset.features().select_rows(&train_idx);
        let train_y = train_idx.iter().map(|&i| dataset.labels()[i]).collect();
        Ok(Self {
            dataset,
            train_idx,
            train_x,
            train_y,
        })
    }

    fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.dataset.class_count()];
        for &y in &self.train_y {
            c[y] += 1;
        }
        c
    }
}

/// A trained class-space model with the epoch it was taken from.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub scorer: LinearScorer<f64>,
    pub selected_epoch: usize,
    /// Validation report of the selected snapshot, when the dataset has
    /// a labelled validation split.
    pub val_report: Option<EvalReport>,
}

/// Chooses a snapshot by validation worst-group accuracy, or the last one
/// when there is no attributed validation split.
fn select(snapshots: Vec<LinearScorer<f64>>, ds: &FeatureDataset) -> Result<TrainedModel> {
    if snapshots.is_empty() {
        return Err(Error::NoSnapshots);
    }
    if ds.has_attributes() && !ds.split_indices(Split::Val).is_empty() {
        let (e, r) = select_model(&snapshots, ds)?;
        let scorer = snapshots.into_iter().nth(e).expect("selected index exists");
        return Ok(TrainedModel {
            scorer,
            selected_epoch: e,
            val_report: Some(r),
        });
    }
    let e = snapshots.len() - 1;
    Ok(TrainedModel {
        scorer: snapshots.into_iter().next_back().expect("non-empty"),
        selected_epoch: e,
        val_report: None,
    })
}

/// Biased class model. With `project`, it is trained on `Πx` and the returned
/// scorer applies `Π` itself (its weights are `WΠ`).
#[derive(Debug, Clone)]
pub struct BiasedModel {
    pub scorer: LinearScorer<f64>,
    pub projection: Option<ProjectionOperator<f64>>,
}

pub fn train_biased(
    data: &PreparedData,
    z: &ClassProxyMatrix,
    cfg: &PipelineConfig,
    project: bool,
) -> Result<BiasedModel> {
    let prior = GroupPrior::from_counts(&data.class_counts(), cfg.prior_smoothing, 1.0)?;
    let init = LinearScorer::from_proxies(z.matrix(), cfg.train.bias)?;
    if project {
        let op = ProjectionOperator::from_proxies(z.matrix(), cfg.pinv_tol);
        let xp = op.project_rows(&data.train_x)?;
        let out = train(
            TrainView::new(&xp, &data.train_y),
            LossKind::La,
            Some(&prior),
            &cfg.train,
            init,
        )?;
        Ok(BiasedModel {
            scorer: out.scorer.compose_right(op.matrix())?,
            projection: Some(op),
        })
    } else {
        let out = train(
            TrainView::new(&data.train_x, &data.train_y),
            LossKind::La,
            Some(&prior),
            &cfg.train,
            init,
        )?;
        Ok(BiasedModel {
            scorer: out.scorer,
            projection: None,
        })
    }
}

/// Pseudo-attributes (1 where the biased model errs) and the induced groups
/// `2y + â` over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGrouping {
    pub attributes: Vec<usize>,
    pub groups: Vec<usize>,
    pub group_counts: Vec<usize>,
}

impl PseudoGrouping {
    pub fn from_groups(groups: Vec<usize>, classes: usize) -> Self {
        let mut group_counts = vec![0; classes * PSEUDO_ATTRS];
        for &g in &groups {
            group_counts[g] += 1;
        }
        Self {
            attributes: groups.iter().map(|g| g % PSEUDO_ATTRS).collect(),
            groups,
            group_counts,
        }
    }

    pub fn prior(&self, smoothing: f64, tau: f64) -> Result<GroupPrior> {
        GroupPrior::from_counts(&self.group_counts, smoothing, tau)
    }

    pub fn identified(&self) -> usize {
        self.attributes.iter().filter(|&&a| a == 1).count()
    }
}

pub fn infer_pseudo_groups(
    biased: &LinearScorer<f64>,
    x: &Matrix<f64>,
    labels: &[usize],
    classes: usize,
) -> Result<PseudoGrouping> {
    if x.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            x.rows()
        )));
    }
    let groups = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let wrong = usize::from(biased.predict(x.row(i)) != y);
            y * PSEUDO_ATTRS + wrong
        })
        .collect();
    Ok(PseudoGrouping::from_groups(groups, classes))
}

/// Group-space model together with its aggregated class classifier.
#[derive(Debug, Clone)]
pub struct DebiasedClassifier {
    pub group_scorer: LinearScorer<f64>,
    pub classifier: TrainedModel,
}

/// Trains group heads with the group-logit-adjusted loss on `groups` and sums
/// them into class heads. `prior` carries `β̂` and `τ`.
pub fn train_debiased(
    data: &PreparedData,
    z: &ClassProxyMatrix,
    groups: &[usize],
    prior: &GroupPrior,
    cfg: &TrainConfig,
) -> Result<DebiasedClassifier> {
    let init = LinearScorer::group_head_from_proxies(z.matrix(), PSEUDO_ATTRS, cfg.bias)?;
    let out = train(
        TrainView::new(&data.train_x, groups),
        LossKind::Gla,
        Some(prior),
        cfg,
        init,
    )?;
    let class_snaps = out
        .snapshots
        .iter()
        .map(|s| s.aggregate_groups(PSEUDO_ATTRS))
        .collect::<Result<Vec<_>>>()?;
    let classifier = select(class_snaps, &data.dataset)?;
    let group_scorer = out
        .snapshots
        .into_iter()
        .nth(classifier.selected_epoch)
        .expect("selected index exists");
    Ok(DebiasedClassifier {
        group_scorer,
        classifier,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub tau: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub normalize: bool,
    pub selected_epoch: usize,
    pub val_wga: Option<f64>,
    pub pseudo_group_counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct PpaOutcome {
    pub biased: BiasedModel,
    pub grouping: PseudoGrouping,
    pub debiased: DebiasedClassifier,
    pub manifest: RunManifest,
}

fn pseudo_grouping(
    data: &PreparedData,
    z: &ClassProxyMatrix,
    cfg: &PipelineConfig,
    project: bool,
) -> Result<(BiasedModel, PseudoGrouping)> {
    let biased = train_biased(data, z, cfg, project)?;
    let mut grouping = infer_pseudo_groups(&biased.scorer, &data.train_x, &data.train_y, z.class_count())?;
    if cfg.pseudo_noise > 0.0 {
        let noisy = inject_pseudo_label_noise(&grouping.groups, PSEUDO_ATTRS, cfg.pseudo_noise, cfg.noise_seed)?;
        grouping = PseudoGrouping::from_groups(noisy, z.class_count());
    }
    Ok((biased, grouping))
}

/// Full pipeline. `project = false` and `tau = 0` give the two ablations.
pub fn run_ppa_with(
    data: &PreparedData,
    z: &ClassProxyMatrix,
    cfg: &PipelineConfig,
    project: bool,
    method: Method,
) -> Result<PpaOutcome> {
    let (biased, grouping) = pseudo_grouping(data, z, cfg, project)?;
    let prior = grouping.prior(cfg.prior_smoothing, cfg.tau)?;
    let debiased = train_debiased(data, z, &grouping.groups, &prior, &cfg.train)?;
    let manifest = RunManifest {
        method,
        tau: Some(cfg.tau),
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        normalize: cfg.normalize,
        selected_epoch: debiased.classifier.selected_epoch,
        val_wga: debiased.classifier.val_report.as_ref().map(|r| r.worst_group_accuracy),
        pseudo_group_counts: Some(grouping.group_counts.clone()),
    };
    Ok(PpaOutcome {
        biased,
        grouping,
        debiased,
        manifest,
    })
}

pub fn run_ppa(ds: &FeatureDataset, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<PpaOutcome> {
    let data = PreparedData::new(ds, z, cfg.normalize)?;
    run_ppa_with(&data, z, cfg, true, Method::Ppa)
}

/// Cross-entropy probe on class labels.
pub fn train_erm(data: &PreparedData, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<TrainedModel> {
    let init = LinearScorer::from_proxies(z.matrix(), cfg.train.bias)?;
    let out = train(
        TrainView::new(&data.train_x, &data.train_y),
        LossKind::Ce,
        None,
        &cfg.train,
        init,
    )?;
    select(out.snapshots, &data.dataset)
}

/// Two-stage upweighting: a first-stage model marks its training errors, the
/// second stage weights them by `jtt_lambda`.
pub fn train_jtt(data: &PreparedData, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<TrainedModel> {
    if !(cfg.jtt_lambda > 0.0) || !cfg.jtt_lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {}",
            cfg.jtt_lambda
        )));
    }
    let errors = match cfg.jtt_first_stage {
        JttFirstStage::Erm => erm_error_set(data, z, cfg)?,
        JttFirstStage::Projected => projected_error_set(data, z, cfg)?,
    };
    let weights: Vec<f64> = errors
        .into_iter()
        .map(|e| if e == 1 { cfg.jtt_lambda } else { 1.0 })
        .collect();
    let init = LinearScorer::from_proxies(z.matrix(), cfg.train.bias)?;
    let view = TrainView::new(&data.train_x, &data.train_y).weighted(&weights);
    let out = train(view, LossKind::Ce, None, &cfg.train, init)?;
    select(out.snapshots, &data.dataset)
}

/// Training errors (1 = misclassified) of a cross-entropy model after the
/// full schedule, without validation selection.
pub fn erm_error_set(data: &PreparedData, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let init = LinearScorer::from_proxies(z.matrix(), cfg.train.bias)?;
    let out = train(
        TrainView::new(&data.train_x, &data.train_y),
        LossKind::Ce,
        None,
        &cfg.train,
        init,
    )?;
    Ok(data
        .train_y
        .iter()
        .enumerate()
        .map(|(i, &y)| usize::from(out.scorer.predict(data.train_x.row(i)) != y))
        .collect())
}

/// Training errors of the projected biased model: the pseudo-attributes of
/// the first pipeline stage.
pub fn projected_error_set(data: &PreparedData, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let biased = train_biased(data, z, cfg, true)?;
    Ok(infer_pseudo_groups(&biased.scorer, &data.train_x, &data.train_y, z.class_count())?.attributes)
}

/// Group-logit-adjusted training on ground-truth groups `y·A + a`.
pub fn train_gt_gla(data: &PreparedData, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<DebiasedClassifier> {
    let attrs = data
        .dataset
        .attributes()
        .ok_or(Error::MissingAttributes("ground-truth groups"))?;
    let n_attr = data.dataset.effective_attribute_count().unwrap_or(1);
    if n_attr != PSEUDO_ATTRS {
        return Err(Error::InvalidArgument(format!(
            "ground-truth groups need {PSEUDO_ATTRS} attribute values, found {n_attr}"
        )));
    }
    let groups: Vec<usize> = data
        .train_idx
        .iter()
        .map(|&i| data.dataset.labels()[i] * PSEUDO_ATTRS + attrs[i])
        .collect();
    let grouping = PseudoGrouping::from_groups(groups, z.class_count());
    let prior = grouping.prior(cfg.prior_smoothing, cfg.tau)?;
    train_debiased(data, z, &grouping.groups, &prior, &cfg.train)
}

/// Result of one method: the class classifier and its test report.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub model: TrainedModel,
    pub test_report: Option<EvalReport>,
    pub manifest: RunManifest,
}

pub fn run_method(
    ds: &FeatureDataset,
    z: &ClassProxyMatrix,
    cfg: &PipelineConfig,
    method: Method,
) -> Result<MethodResult> {
    let data = PreparedData::new(ds, z, cfg.normalize)?;
    run_method_prepared(&data, z, cfg, method)
}

pub fn run_method_prepared(
    data: &PreparedData,
    z: &ClassProxyMatrix,
    cfg: &PipelineConfig,
    method: Method,
) -> Result<MethodResult> {
    let (model, tau, counts) = match method {
        Method::Erm => (train_erm(data, z, cfg)?, None, None),
        Method::Jtt => (train_jtt(data, z, cfg)?, None, None),
        Method::Ppa | Method::ProjOnly | Method::GlaOnly => {
            let mut c = cfg.clone();
            if method == Method::ProjOnly {
                c.tau = 0.0;
            }
            let out = run_ppa_with(data, z, &c, method != Method::GlaOnly, method)?;
            (out.debiased.classifier, Some(c.tau), Some(out.grouping.group_counts))
        }
        Method::GtGla => (train_gt_gla(data, z, cfg)?.classifier, Some(cfg.tau), None),
    };
    let test_report = if data.dataset.has_attributes() && !data.dataset.split_indices(Split::Test).is_empty() {
        Some(evaluate_split(&model.scorer, &data.dataset, Split::Test)?)
    } else {
        None
    };
    let manifest = RunManifest {
        method,
        tau,
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        normalize: cfg.normalize,
        selected_epoch: model.selected_epoch,
        val_wga: model.val_report.as_ref().map(|r| r.worst_group_accuracy),
        pseudo_group_counts: counts,
    };
    Ok(MethodResult {
        method,
        model,
        test_report,
        manifest,
    })
}

/// Second stage retrained for each `τ`, sharing one biased model and one
/// pseudo-grouping.
pub fn sweep_tau(
    data: &PreparedData,
    z: &ClassProxyMatrix,
    cfg: &PipelineConfig,
    grouping: &PseudoGrouping,
    tau: f64,
) -> Result<TauPoint> {
    let prior = grouping.prior(cfg.prior_smoothing, tau)?;
    let deb = train_debiased(data, z, &grouping.groups, &prior, &cfg.train)?;
    let val = deb
        .classifier
        .val_report
        .as_ref()
        .ok_or(Error::MissingAttributes("validation split"))?;
    let test = evaluate_split(&deb.classifier.scorer, &data.dataset, Split::Test)?;
    Ok(TauPoint {
        tau,
        val_wga: val.worst_group_accuracy,
        test_wga: test.worst_group_accuracy,
        test_avg: test.average_accuracy,
        test_bge: test.balanced_group_error,
    })
}

/// Biased model and pseudo-grouping used by every point of a τ sweep.
pub fn sweep_grouping(data: &PreparedData, z: &ClassProxyMatrix, cfg: &PipelineConfig) -> Result<PseudoGrouping> {
    Ok(pseudo_grouping(data, z, cfg, true)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::TargetSpace;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("dfr").is_err());
    }

    #[test]
    fn pseudo_attribute_marks_errors() {
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]]).unwrap();
        let s = LinearScorer::new(
            Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(),
            None,
            TargetSpace::Class,
        )
        .unwrap();
        let g = infer_pseudo_groups(&s, &x, &[1, 0, 0, 1], 2).unwrap();
        assert_eq!(g.attributes, vec![0, 0, 1, 1]);
        assert_eq!(g.groups, vec![2, 0, 1, 3]);
        assert_eq!(g.group_counts, vec![1, 1, 1, 1]);
        assert_eq!(g.identified(), 2);
    }

    #[test]
    fn ties_count_as_class_zero() {
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let s = LinearScorer::new(
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            None,
            TargetSpace::Class,
        )
        .unwrap();
        assert_eq!(infer_pseudo_groups(&s, &x, &[1], 2).unwrap().groups, vec![3]);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { tau: 0.5, ..a.clone() };
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
