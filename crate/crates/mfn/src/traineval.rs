//! Training loop, metrics (AUC, RelaImpr), model checkpoints, and the
//! Base-vs-variants comparison protocol.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::baseline::{BaselineConfig, BaselineModel};
use crate::centers::{self, CenterInit, CenterOptimizer, CenterTrainConfig, CenterTrainOutcome, InterestCenters};
use crate::config::RunConfig;
use crate::diffcore::{AdamConfig, Matrix, NodeId, ParamStore, Tape};
use crate::error::{MfnError, Result};
use crate::features::{self, FieldTables};
use crate::model::{MfnModel, PROB_CLAMP};
use crate::persist;
use crate::rng;
use crate::synthgen::{Dataset, LabeledExample};

const STREAM_SHUFFLE: u64 = 0x5F0F;
const STREAM_CENTERS: u64 = 0xCE27;

/// Evaluation results on one dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    pub n_examples: usize,
}

/// Mean clamped binary cross entropy.
pub fn bce_mean(probs: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    -total / probs.len() as f64
}

/// AUC as the Mann-Whitney statistic with half credit for ties, computed in
/// O(n log n) via average ranks over tie groups.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MfnError::Contract(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MfnError::Metric("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MfnError::Metric(
            "AUC needs at least one positive and one negative example".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Relative AUC improvement over a base model after removing the 0.5
/// random-guess floor: `((auc_test - 0.5)/(auc_base - 0.5) - 1) * 100`.
pub fn rela_impr(auc_test: f64, auc_base: f64) -> Result<f64> {
    if auc_base == 0.5 {
        return Err(MfnError::Metric(
            "RelaImpr is undefined for a base AUC of exactly 0.5 (division by zero)".into(),
        ));
    }
    Ok(((auc_test - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Model variants of the comparison protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    Mfn,
    MfnWoPretrain,
    MfnWoCombination,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::Mfn,
        Variant::MfnWoPretrain,
        Variant::MfnWoCombination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Mfn => "mfn",
            Variant::MfnWoPretrain => "mfn-wo-pretrain",
            Variant::MfnWoCombination => "mfn-wo-combination",
        }
    }

    pub fn parse(text: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == text.trim())
            .ok_or_else(|| {
                MfnError::Config(format!(
                    "unknown variant `{text}` (expected base, mfn, mfn-wo-pretrain or mfn-wo-combination)"
                ))
            })
    }

    fn needs_fixed(self) -> bool {
        self != Variant::Base
    }

    fn needs_pretrained_centers(self) -> bool {
        matches!(self, Variant::Mfn | Variant::MfnWoCombination)
    }
}

/// A trained model of either architecture.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Base(BaselineModel),
    Mfn(MfnModel),
}

impl TrainedModel {
    pub fn score_batch(&self, examples: &[LabeledExample]) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Base(m) => m.score_batch(examples),
            TrainedModel::Mfn(m) => m.score_batch(examples),
        }
    }
}

/// Anything trainable by [`fit`]: a batch-loss graph plus its parameters.
pub trait CtrTrainable {
    fn batch_loss_node(&self, tape: &mut Tape, batch: &[LabeledExample]) -> Result<NodeId>;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl CtrTrainable for BaselineModel {
    fn batch_loss_node(&self, tape: &mut Tape, batch: &[LabeledExample]) -> Result<NodeId> {
        self.batch_loss_on_tape(tape, batch)
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl CtrTrainable for MfnModel {
    fn batch_loss_node(&self, tape: &mut Tape, batch: &[LabeledExample]) -> Result<NodeId> {
        Ok(self.batch_loss_on_tape(tape, batch)?.0)
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[derive(Clone, Copy, Debug)]
pub enum StopRule {
    Epochs(usize),
    Steps(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub stop: StopRule,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Mini-batch Adam over seeded full-dataset shuffles. Returns the loss curve
/// as `(step, batch loss)` pairs.
pub fn fit<M: CtrTrainable>(
    model: &mut M,
    examples: &[LabeledExample],
    cfg: &FitConfig,
) -> Result<Vec<(usize, f64)>> {
    if examples.is_empty() {
        return Err(MfnError::Data("training set is empty".into()));
    }
    let batch_size = cfg.batch_size.max(1);
    let (epochs, max_steps) = match cfg.stop {
        StopRule::Epochs(e) => (e, usize::MAX),
        StopRule::Steps(s) => (usize::MAX, s),
    };
    let mut curve = Vec::new();
    let mut step = 0;
    'outer: for epoch in 0..epochs {
        if step >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut r = rng::rng(rng::derive(cfg.seed, STREAM_SHUFFLE ^ (epoch as u64) << 16));
        order.shuffle(&mut r);
        for chunk in order.chunks(batch_size) {
            if step >= max_steps {
                break 'outer;
            }
            let batch: Vec<LabeledExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut tape = Tape::new();
            let loss = model.batch_loss_node(&mut tape, &batch)?;
            curve.push((step, tape.value(loss).item()));
            tape.backward(loss)?;
            tape.accumulate_param_grads(model.store_mut());
            model.store_mut().adam_step(&cfg.adam);
            step += 1;
        }
    }
    Ok(curve)
}

/// Trains the fixed embedding tables via the auxiliary CTR task on the
/// baseline model (see `features::pretrain_fixed_embeddings`).
pub fn pretrain_embeddings(train: &Dataset, rc: &RunConfig) -> Result<FieldTables> {
    features::pretrain_fixed_embeddings(train, rc)
}

/// Pretrains one center matrix per channel. Each channel's corpus is the
/// per-user behavior sequences embedded with the fixed tables under that
/// channel's field spec.
pub fn pretrain_channel_centers(
    train: &Dataset,
    fixed: &FieldTables,
    rc: &RunConfig,
) -> Result<Vec<CenterTrainOutcome>> {
    if train.is_empty() {
        return Err(MfnError::Data("training set is empty".into()));
    }
    let user_seqs = train.user_sequences();
    let mut outcomes = Vec::with_capacity(rc.channels.len());
    for (i, spec) in rc.channels.iter().enumerate() {
        let mut corpus = Vec::with_capacity(user_seqs.len());
        for (_, items, _) in &user_seqs {
            let seq = crate::features::BehaviorSequence::new(items.clone())?;
            corpus.push(fixed.embed_sequence(&seq, spec)?);
        }
        let cfg = CenterTrainConfig {
            k: rc.k,
            lr: rc.center_lr,
            batch_size: rc.center_batch,
            max_iters: rc.center_iters,
            optimizer: if rc.center_sgd { CenterOptimizer::Sgd } else { CenterOptimizer::Adam },
            init: CenterInit::FromData,
            seed: rng::derive(rc.seed, STREAM_CENTERS ^ i as u64),
        };
        outcomes.push(centers::pretrain_centers(&corpus, &cfg)?);
    }
    Ok(outcomes)
}

/// A trained model plus its loss curve.
pub struct TrainArtifacts {
    pub model: TrainedModel,
    pub loss_curve: Vec<(usize, f64)>,
}

/// Trains one variant for `rc.epochs` epochs of Adam at `rc.lr`.
///
/// `fixed` is required for every MFN variant; `pretrained_centers` is
/// required for `mfn` and `mfn-wo-combination` (the `mfn-wo-pretrain`
/// ablation draws seeded random centers instead and still freezes them).
pub fn train_variant(
    variant: Variant,
    train: &Dataset,
    fixed: Option<&FieldTables>,
    pretrained_centers: Option<&[InterestCenters]>,
    rc: &RunConfig,
) -> Result<TrainArtifacts> {
    if train.is_empty() {
        return Err(MfnError::Data("training set is empty".into()));
    }
    let fit_cfg = FitConfig {
        stop: StopRule::Epochs(rc.epochs),
        batch_size: rc.batch_size,
        adam: rc.adam(),
        seed: rc.seed,
    };
    match variant {
        Variant::Base => {
            let mut model = BaselineModel::new(
                rc.world().vocabs(),
                BaselineConfig {
                    dim: rc.dim,
                    users: rc.users,
                    contexts: rc.contexts,
                    head_hidden: vec![64, 32],
                    seed: rc.seed,
                },
            );
            let curve = fit(&mut model, &train.examples, &fit_cfg)?;
            Ok(TrainArtifacts { model: TrainedModel::Base(model), loss_curve: curve })
        }
        _ => {
            let fixed = fixed.ok_or_else(|| {
                MfnError::Config(format!("variant `{}` needs pretrained fixed embeddings", variant.name()))
            })?;
            let channel_centers: Vec<InterestCenters> = if variant.needs_pretrained_centers() {
                let cs = pretrained_centers.ok_or_else(|| {
                    MfnError::Config(format!(
                        "variant `{}` needs pretrained centers (run center pretraining first)",
                        variant.name()
                    ))
                })?;
                if cs.len() != rc.channels.len() {
                    return Err(MfnError::Config(format!(
                        "{} centers matrices for {} channels",
                        cs.len(),
                        rc.channels.len()
                    )));
                }
                cs.to_vec()
            } else {
                (0..rc.channels.len())
                    .map(|i| {
                        centers::random_normal_centers(
                            rc.k,
                            rc.dim,
                            rng::derive(rc.seed, STREAM_CENTERS ^ (0x8000 + i as u64)),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let use_combination = variant != Variant::MfnWoCombination;
            let mut model = MfnModel::new(rc.mfn(use_combination), fixed.clone(), channel_centers)?;
            let curve = fit(&mut model, &train.examples, &fit_cfg)?;
            Ok(TrainArtifacts { model: TrainedModel::Mfn(model), loss_curve: curve })
        }
    }
}

/// Scores a test set and reports AUC plus mean log loss.
pub fn evaluate(model: &TrainedModel, test: &Dataset) -> Result<Metrics> {
    if test.is_empty() {
        return Err(MfnError::Data("test set is empty".into()));
    }
    let scores = model.score_batch(&test.examples)?;
    let labels: Vec<u8> = test.examples.iter().map(|e| e.label).collect();
    Ok(Metrics {
        auc: auc(&scores, &labels)?,
        logloss: bce_mean(&scores, &labels),
        n_examples: test.len(),
    })
}

// ── Checkpoints ──────────────────────────────────────────────────────────

fn variant_of(model: &TrainedModel) -> Variant {
    match model {
        TrainedModel::Base(_) => Variant::Base,
        TrainedModel::Mfn(m) => {
            if m.cfg.use_combination {
                Variant::Mfn
            } else {
                Variant::MfnWoCombination
            }
        }
    }
}

/// Writes a model checkpoint: the full config echo plus every table.
pub fn save_model(path: impl AsRef<Path>, model: &TrainedModel, rc: &RunConfig) -> Result<()> {
    let mut config = rc.echo();
    config.push(("variant".to_string(), variant_of(model).name().to_string()));
    let tables = match model {
        TrainedModel::Base(m) => m.named_tables(),
        TrainedModel::Mfn(m) => m.named_tables(),
    };
    let refs: Vec<(&str, &Matrix)> = tables.iter().map(|(n, m)| (n.as_str(), m)).collect();
    persist::save_checkpoint(path, &config, &refs)
}

/// Restores a model (bit-identical scoring) and its config from a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<(TrainedModel, RunConfig)> {
    let (config, tables) = persist::load_checkpoint(path)?;
    let rc = RunConfig::from_pairs(&config)?;
    let variant_name = config
        .iter()
        .find(|(k, _)| k == "variant")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| MfnError::Data("checkpoint lacks a `variant` key".into()))?;
    let variant = Variant::parse(&variant_name)?;
    match variant {
        Variant::Base => {
            let mut model = BaselineModel::new(
                rc.world().vocabs(),
                BaselineConfig {
                    dim: rc.dim,
                    users: rc.users,
                    contexts: rc.contexts,
                    head_hidden: vec![64, 32],
                    seed: rc.seed,
                },
            );
            model.load_named_tables(tables)?;
            Ok((TrainedModel::Base(model), rc))
        }
        _ => {
            let fixed_named: Vec<(String, Matrix)> = tables
                .iter()
                .filter_map(|(n, m)| {
                    n.strip_prefix("fixed:").map(|f| (f.to_string(), m.clone()))
                })
                .collect();
            let fixed = FieldTables::from_named(fixed_named)?;
            let placeholder: Vec<InterestCenters> = (0..rc.channels.len())
                .map(|_| InterestCenters::new(Matrix::zeros(rc.k, rc.dim)))
                .collect::<Result<Vec<_>>>()?;
            let use_combination = variant != Variant::MfnWoCombination;
            let mut model = MfnModel::new(rc.mfn(use_combination), fixed, placeholder)?;
            model.load_named_tables(tables)?;
            Ok((TrainedModel::Mfn(model), rc))
        }
    }
}

// ── Comparison protocol ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub variant: String,
    /// Seed as text so summary rows can say `mean`.
    pub seed: String,
    pub auc: f64,
    pub logloss: f64,
    pub rela_impr_pct: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,auc,logloss,rela_impr_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.4}\n",
                r.variant, r.seed, r.auc, r.logloss, r.rela_impr_pct
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| MfnError::io(path.display().to_string(), e))
    }

    /// Human-readable fixed-width table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>6} {:>10} {:>10} {:>12}\n",
            "variant", "seed", "auc", "logloss", "rela_impr"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>6} {:>10.4} {:>10.4} {:>11.2}%\n",
                r.variant, r.seed, r.auc, r.logloss, r.rela_impr_pct
            ));
        }
        out
    }

    /// Mean AUC of a variant over the per-seed rows.
    pub fn mean_auc(&self, variant: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.seed != "mean")
            .map(|r| r.auc)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Runs the full protocol: per seed, trains Base, pretrains embeddings and
/// centers once if any MFN variant needs them, trains every requested
/// variant, and reports per-seed plus mean rows (RelaImpr against the
/// same-seed Base).
pub fn compare(
    train: &Dataset,
    test: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    rc: &RunConfig,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(MfnError::Config("compare needs at least one seed".into()));
    }
    if variants.is_empty() {
        return Err(MfnError::Config("compare needs at least one variant".into()));
    }

    let any_fixed = variants.iter().any(|v| v.needs_fixed());
    let any_centers = variants.iter().any(|v| v.needs_pretrained_centers());

    // rows[variant][seed]
    let mut per_variant: Vec<Vec<CompareRow>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let mut rc_s = rc.clone();
        rc_s.seed = seed;

        let base = train_variant(Variant::Base, train, None, None, &rc_s)?;
        let base_metrics = evaluate(&base.model, test)?;

        let fixed = if any_fixed { Some(pretrain_embeddings(train, &rc_s)?) } else { None };
        let pretrained: Option<Vec<InterestCenters>> = if any_centers {
            let outcomes = pretrain_channel_centers(train, fixed.as_ref().expect("fixed exists"), &rc_s)?;
            Some(outcomes.into_iter().map(|o| o.centers).collect())
        } else {
            None
        };

        for (vi, &variant) in variants.iter().enumerate() {
            let metrics = if variant == Variant::Base {
                base_metrics
            } else {
                let trained = train_variant(
                    variant,
                    train,
                    fixed.as_ref(),
                    pretrained.as_deref(),
                    &rc_s,
                )?;
                evaluate(&trained.model, test)?
            };
            per_variant[vi].push(CompareRow {
                variant: variant.name().to_string(),
                seed: seed.to_string(),
                auc: metrics.auc,
                logloss: metrics.logloss,
                rela_impr_pct: rela_impr(metrics.auc, base_metrics.auc)?,
            });
        }
    }

    let mut comparison = Comparison::default();
    for rows in per_variant {
        let n = rows.len() as f64;
        let mean = CompareRow {
            variant: rows[0].variant.clone(),
            seed: "mean".to_string(),
            auc: rows.iter().map(|r| r.auc).sum::<f64>() / n,
            logloss: rows.iter().map(|r| r.logloss).sum::<f64>() / n,
            rela_impr_pct: rows.iter().map(|r| r.rela_impr_pct).sum::<f64>() / n,
        };
        comparison.rows.extend(rows);
        comparison.rows.push(mean);
    }
    Ok(comparison)
}

/// Writes a `step,loss` curve CSV.
pub fn save_loss_csv(path: impl AsRef<Path>, curve: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss:.12}\n"));
    }
    std::fs::write(path, out).map_err(|e| MfnError::io(path.display().to_string(), e))
}
