//! Interest centers: entropy-regularized pretraining over fixed-embedded
//! behavior sequences, soft assignment probabilities, and cluster purity.
//!
//! The objective splits into two entropies over the assignment matrix P of a
//! sequence: the per-behavior assignment entropy (minimized, so behaviors
//! commit to a center) and the entropy of the per-center usage means
//! (maximized, so no center goes unused). Training minimizes their
//! difference with mini-batches over users; one global center matrix is
//! shared by all users.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::diffcore::matrix::{self, Matrix};
use crate::diffcore::{AdamConfig, NodeId, ParamStore, Tape};
use crate::error::{MfnError, Result};
use crate::rng;

/// Entropy terms are clamped at this floor inside the log, keeping the
/// 0 * ln 0 convention at zero.
pub const LOG_CLAMP: f64 = 1e-12;

const STREAM_INIT: u64 = 0xC0DE;
const STREAM_BATCH: u64 = 0xBA7C;

/// The global K x d center matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestCenters {
    c: Matrix,
}

impl InterestCenters {
    pub fn new(c: Matrix) -> Result<Self> {
        if c.rows() == 0 {
            return Err(MfnError::Config("need at least one interest center".into()));
        }
        if !c.is_finite() {
            return Err(MfnError::Contract("center matrix has non-finite entries".into()));
        }
        Ok(InterestCenters { c })
    }

    pub fn k(&self) -> usize {
        self.c.rows()
    }

    pub fn dim(&self) -> usize {
        self.c.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::persist::save_tables(path, &[("center", &self.c)])
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut tables = crate::persist::load_tables(path)?;
        if tables.len() != 1 || tables[0].0 != "center" {
            return Err(MfnError::Data(
                "centers file must contain exactly the `center` table".into(),
            ));
        }
        InterestCenters::new(tables.remove(0).1)
    }
}

/// The two entropy terms and their difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyLossParts {
    pub l_se: f64,
    pub l_me: f64,
    pub l_e: f64,
}

/// Soft assignment of each behavior to each center:
/// `P = softmax_rows(seq_fixed * C^T)`.
pub fn assignment_probs(seq_fixed: &Matrix, centers: &InterestCenters) -> Result<Matrix> {
    let ct = matrix::transpose(centers.matrix());
    Ok(matrix::softmax_rows(&matrix::matmul(seq_fixed, &ct)?))
}

/// Tape variant of [`assignment_probs`] for training through the centers.
pub fn assignment_probs_on_tape(
    tape: &mut Tape,
    seq_fixed: NodeId,
    centers: NodeId,
) -> Result<NodeId> {
    let ct = tape.transpose(centers);
    let logits = tape.matmul(seq_fixed, ct)?;
    Ok(tape.softmax_rows(logits))
}

/// Entropy terms of an N x K assignment matrix whose rows sum to 1:
///
/// - `l_se = -(1/(K*N)) * sum_{j,t} P_tj ln P_tj`
/// - `l_me = -(1/K) * sum_j m_j ln m_j` with `m_j = (1/N) sum_t P_tj`
/// - `l_e  = l_se - l_me`
pub fn entropy_losses(p: &Matrix) -> Result<EntropyLossParts> {
    let (n, k) = p.shape();
    for t in 0..n {
        let sum: f64 = p.row(t).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MfnError::Contract(format!(
                "assignment row {t} sums to {sum}, expected 1"
            )));
        }
    }
    let mut se = 0.0;
    for &v in p.data() {
        se += v * v.max(LOG_CLAMP).ln();
    }
    let l_se = -se / (k as f64 * n as f64);

    let means = matrix::col_mean(p);
    let mut me = 0.0;
    for &m in means.data() {
        me += m * m.max(LOG_CLAMP).ln();
    }
    let l_me = -me / k as f64;

    Ok(EntropyLossParts {
        l_se,
        l_me,
        l_e: l_se - l_me,
    })
}

/// Tape variant of the combined entropy loss `l_e` (a scalar node).
pub fn entropy_loss_on_tape(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let (n, k) = tape.value(p).shape();

    let ln_p = tape.ln_clamped(p, LOG_CLAMP);
    let p_ln_p = tape.mul_elem(p, ln_p)?;
    let se_sum = tape.sum_all(p_ln_p);
    let l_se = tape.scale(se_sum, -1.0 / (k as f64 * n as f64));

    let means = tape.col_mean(p);
    let ln_m = tape.ln_clamped(means, LOG_CLAMP);
    let m_ln_m = tape.mul_elem(means, ln_m)?;
    let me_sum = tape.sum_all(m_ln_m);
    let l_me = tape.scale(me_sum, -1.0 / k as f64);

    tape.sub(l_se, l_me)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterOptimizer {
    Adam,
    /// Literal `C <- C - alpha * dC`.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterInit {
    /// Farthest-point selection of K behavior rows from the corpus (first
    /// pick seeded, then greedy max-min distance, ties to the lowest index).
    FromData,
    /// Seeded normal rows with scale 1/sqrt(d); the no-pretraining ablation.
    RandomNormal,
}

#[derive(Clone, Copy, Debug)]
pub struct CenterTrainConfig {
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub optimizer: CenterOptimizer,
    pub init: CenterInit,
    pub seed: u64,
}

/// Trained centers plus the entropy loss on a fixed evaluation batch before
/// and after training.
#[derive(Clone, Debug)]
pub struct CenterTrainOutcome {
    pub centers: InterestCenters,
    pub eval_loss_initial: f64,
    pub eval_loss_final: f64,
}

/// Seeded initial centers for a corpus, as used by [`pretrain_centers`].
pub fn init_centers(corpus: &[Matrix], cfg: &CenterTrainConfig) -> Result<InterestCenters> {
    if corpus.is_empty() {
        return Err(MfnError::Data("center pretraining corpus is empty".into()));
    }
    let d = corpus[0].cols();
    let mut r = rng::rng(rng::derive(cfg.seed, STREAM_INIT));
    match cfg.init {
        CenterInit::RandomNormal => {
            let scale = 1.0 / (d as f64).sqrt();
            let c = Matrix::from_fn(cfg.k, d, |_, _| scale * rng::standard_normal(&mut r));
            InterestCenters::new(c)
        }
        CenterInit::FromData => {
            let total: usize = corpus.iter().map(|m| m.rows()).sum();
            if total < cfg.k {
                return Err(MfnError::Config(format!(
                    "corpus has {total} behaviors, fewer than k={}",
                    cfg.k
                )));
            }
            let rows: Vec<&[f64]> = corpus.iter().flat_map(|m| (0..m.rows()).map(move |i| m.row(i))).collect();
            let mut chosen: Vec<usize> = vec![r.gen_range(0..rows.len())];
            let mut min_d2: Vec<f64> = rows
                .iter()
                .map(|row| sq_dist(row, rows[chosen[0]]))
                .collect();
            while chosen.len() < cfg.k {
                let mut best = 0;
                let mut best_d = f64::NEG_INFINITY;
                for (i, &d2) in min_d2.iter().enumerate() {
                    if d2 > best_d {
                        best_d = d2;
                        best = i;
                    }
                }
                chosen.push(best);
                for (i, row) in rows.iter().enumerate() {
                    let d2 = sq_dist(row, rows[best]);
                    if d2 < min_d2[i] {
                        min_d2[i] = d2;
                    }
                }
            }
            let picked: Vec<Vec<f64>> = chosen.iter().map(|&i| rows[i].to_vec()).collect();
            InterestCenters::new(Matrix::from_rows(&picked))
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean entropy loss over a slice of user sequences at the current centers.
pub fn mean_entropy_loss(corpus: &[Matrix], centers: &InterestCenters) -> Result<f64> {
    let mut total = 0.0;
    for seq in corpus {
        let p = assignment_probs(seq, centers)?;
        total += entropy_losses(&p)?.l_e;
    }
    Ok(total / corpus.len() as f64)
}

/// Mini-batch pretraining of the center matrix.
///
/// Per iteration: sample a batch of users, average their entropy losses,
/// backpropagate into C, and step. Stops after `max_iters`. The evaluation
/// batch (the first `batch_size` users) is scored before the first update
/// and after the last one.
pub fn pretrain_centers(corpus: &[Matrix], cfg: &CenterTrainConfig) -> Result<CenterTrainOutcome> {
    if corpus.is_empty() {
        return Err(MfnError::Data("center pretraining corpus is empty".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(MfnError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let users = corpus.len();
    let mut batch_size = cfg.batch_size.max(1);
    if batch_size > users {
        eprintln!("warning: batch size {batch_size} exceeds {users} users; clamping");
        batch_size = users;
    }

    let init = init_centers(corpus, cfg)?;
    let mut store = ParamStore::new();
    let c_id = store.add("centers", init.matrix().clone());

    let eval: Vec<Matrix> = corpus.iter().take(batch_size).cloned().collect();
    let eval_loss_initial = mean_entropy_loss(&eval, &InterestCenters::new(store.value(c_id).clone())?)?;

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut batch_rng = rng::rng(rng::derive(cfg.seed, STREAM_BATCH));
    for _ in 0..cfg.max_iters {
        let mut batch: Vec<usize> = index_sample(&mut batch_rng, users, batch_size).into_vec();
        batch.sort_unstable();

        let mut tape = Tape::new();
        let c_node = tape.param(&store, c_id);
        let mut losses = Vec::with_capacity(batch.len());
        for &u in &batch {
            let seq = tape.constant(corpus[u].clone());
            let p = assignment_probs_on_tape(&mut tape, seq, c_node)?;
            losses.push(entropy_loss_on_tape(&mut tape, p)?);
        }
        let stacked = tape.stack_rows(&losses)?;
        let loss = tape.mean_all(stacked);
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut store);
        match cfg.optimizer {
            CenterOptimizer::Adam => store.adam_step(&adam),
            CenterOptimizer::Sgd => store.sgd_step(cfg.lr),
        }
    }

    let centers = InterestCenters::new(store.value(c_id).clone())?;
    let eval_loss_final = mean_entropy_loss(&eval, &centers)?;
    Ok(CenterTrainOutcome {
        centers,
        eval_loss_initial,
        eval_loss_final,
    })
}

/// Fraction of behaviors whose argmax-assigned cluster matches that
/// cluster's majority ground-truth label.
pub fn purity(
    centers: &InterestCenters,
    behaviors: &Matrix,
    labels: &[u32],
) -> Result<f64> {
    assert_eq!(behaviors.rows(), labels.len(), "one label per behavior");
    let p = assignment_probs(behaviors, centers)?;
    let k = centers.k();
    let n_labels = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let mut counts = vec![vec![0usize; n_labels]; k];
    for t in 0..p.rows() {
        let row = p.row(t);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        counts[best][labels[t] as usize] += 1;
    }
    let majority: usize = counts
        .iter()
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / behaviors.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn centers_of(rows: &[Vec<f64>]) -> InterestCenters {
        InterestCenters::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn single_center_assigns_everything() {
        let e = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.0]]);
        let c = centers_of(&[vec![1.0, 1.0]]);
        let p = assignment_probs(&e, &c).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0]);
    }

    #[test]
    fn duplicate_centers_give_equal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let c = centers_of(&[vec![0.2, -0.4, 0.6], vec![0.2, -0.4, 0.6]]);
        let p = assignment_probs(&e, &c).unwrap();
        for t in 0..5 {
            assert_eq!(p.get(t, 0), p.get(t, 1));
        }
    }

    #[test]
    fn assignment_closed_form() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let c = centers_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = assignment_probs(&e, &c).unwrap();
        let ee = std::f64::consts::E;
        assert!((p.get(0, 0) - ee / (ee + 1.0)).abs() < 1e-12);
        assert!((p.get(0, 1) - 1.0 / (ee + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn center_row_permutation_permutes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let c1 = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let perm = [2usize, 0, 1];
        let c2 = Matrix::from_fn(3, 3, |i, j| c1.get(perm[i], j));
        let p1 = assignment_probs(&e, &InterestCenters::new(c1).unwrap()).unwrap();
        let p2 = assignment_probs(&e, &InterestCenters::new(c2).unwrap()).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                assert_eq!(p2.get(t, j), p1.get(t, perm[j]));
            }
        }
    }

    #[test]
    fn entropy_hand_values() {
        let half_ln2 = 2.0f64.ln() / 2.0;

        // Uniform single row: l_se = l_me = ln(2)/2, l_e = 0.
        let p = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let parts = entropy_losses(&p).unwrap();
        assert!((parts.l_se - half_ln2).abs() < 1e-12);
        assert!((parts.l_me - half_ln2).abs() < 1e-12);
        assert!(parts.l_e.abs() < 1e-12);

        // One-hot balanced: the global minimum l_e = -ln(2)/2.
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let parts = entropy_losses(&p).unwrap();
        assert!(parts.l_se.abs() < 1e-12);
        assert!((parts.l_me - half_ln2).abs() < 1e-12);
        assert!((parts.l_e + half_ln2).abs() < 1e-12);

        // Collapse onto one center: everything degenerates to 0.
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let parts = entropy_losses(&p).unwrap();
        assert!(parts.l_se.abs() < 1e-12);
        assert!(parts.l_me.abs() < 1e-12);
        assert!(parts.l_e.abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_rows() {
        let p = Matrix::from_rows(&[vec![0.9, 0.3]]);
        assert!(matches!(entropy_losses(&p), Err(MfnError::Contract(_))));
    }

    #[test]
    fn entropy_bounds_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.gen_range(1..12);
            let k = rng.gen_range(1..6);
            let mut p = Matrix::from_fn(n, k, |_, _| rng.gen_range(0.0..1.0f64).max(1e-9));
            for t in 0..n {
                let s: f64 = p.row(t).iter().sum();
                for v in p.row_mut(t) {
                    *v /= s;
                }
            }
            let parts = entropy_losses(&p).unwrap();
            let bound = (k as f64).ln() / k as f64;
            assert!(parts.l_se >= -1e-12 && parts.l_se <= bound + 1e-12);
            assert!(parts.l_me >= -1e-12 && parts.l_me <= bound + 1e-12);
            assert!((parts.l_e - (parts.l_se - parts.l_me)).abs() < 1e-15);
            assert!(parts.l_e >= -bound - 1e-12);
        }
    }

    #[test]
    fn tape_entropy_matches_plain_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let c0 = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));

        let mut store = ParamStore::new();
        let c_id = store.add("centers", c0);

        let loss_of = |s: &ParamStore| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let c = tape.param(s, c_id);
            let seq = tape.constant(e.clone());
            let p = assignment_probs_on_tape(&mut tape, seq, c)?;
            let l = entropy_loss_on_tape(&mut tape, p)?;
            Ok(tape.value(l).item())
        };

        // Plain and tape paths agree.
        let plain = {
            let centers = InterestCenters::new(store.value(c_id).clone()).unwrap();
            let p = assignment_probs(&e, &centers).unwrap();
            entropy_losses(&p).unwrap().l_e
        };
        assert!((loss_of(&store).unwrap() - plain).abs() < 1e-14);

        // Finite differences through softmax + entropy.
        let mut tape = Tape::new();
        let c = tape.param(&store, c_id);
        let seq = tape.constant(e.clone());
        let p = assignment_probs_on_tape(&mut tape, seq, c).unwrap();
        let l = entropy_loss_on_tape(&mut tape, p).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(c).unwrap().clone();
        let err = finite_diff_check(&mut store, c_id, &analytic, loss_of, 1e-5, 64, 5).unwrap();
        assert!(err < 1e-4, "entropy gradient check failed: {err}");
    }

    fn gaussian_cluster_corpus(
        g: usize,
        users: usize,
        n_per_user: usize,
        d: usize,
        seed: u64,
    ) -> (Vec<Matrix>, Vec<Matrix>, Vec<u32>) {
        let c = crate::synthgen::gaussian_interest_corpus(g, users, n_per_user, d, 3.0, 0.4, seed);
        (c.sequences, vec![c.behaviors], c.labels)
    }

    #[test]
    fn pretrain_zero_iters_returns_seeded_init() {
        let (corpus, _, _) = gaussian_cluster_corpus(3, 20, 5, 4, 6);
        let cfg = CenterTrainConfig {
            k: 3,
            lr: 0.01,
            batch_size: 8,
            max_iters: 0,
            optimizer: CenterOptimizer::Adam,
            init: CenterInit::FromData,
            seed: 17,
        };
        let out = pretrain_centers(&corpus, &cfg).unwrap();
        let init = init_centers(&corpus, &cfg).unwrap();
        assert_eq!(out.centers, init);
    }

    #[test]
    fn pretrain_is_bit_deterministic() {
        let (corpus, _, _) = gaussian_cluster_corpus(3, 30, 5, 4, 7);
        let cfg = CenterTrainConfig {
            k: 3,
            lr: 0.02,
            batch_size: 8,
            max_iters: 40,
            optimizer: CenterOptimizer::Adam,
            init: CenterInit::FromData,
            seed: 21,
        };
        let a = pretrain_centers(&corpus, &cfg).unwrap();
        let b = pretrain_centers(&corpus, &cfg).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.eval_loss_final.to_bits(), b.eval_loss_final.to_bits());
    }

    #[test]
    fn pretrain_recovers_gaussian_clusters() {
        let (corpus, stacked, labels) = gaussian_cluster_corpus(4, 120, 8, 6, 8);
        let cfg = CenterTrainConfig {
            k: 4,
            lr: 0.02,
            batch_size: 16,
            max_iters: 150,
            optimizer: CenterOptimizer::Adam,
            init: CenterInit::FromData,
            seed: 9,
        };
        let out = pretrain_centers(&corpus, &cfg).unwrap();
        assert!(out.eval_loss_final <= out.eval_loss_initial);
        let pur = purity(&out.centers, &stacked[0], &labels).unwrap();
        assert!(pur >= 0.9, "purity {pur}");
    }

    #[test]
    fn pretrain_with_sgd_switch_runs() {
        let (corpus, _, _) = gaussian_cluster_corpus(2, 20, 4, 3, 10);
        let cfg = CenterTrainConfig {
            k: 2,
            lr: 0.5,
            batch_size: 64, // larger than the corpus: clamps with a warning
            max_iters: 30,
            optimizer: CenterOptimizer::Sgd,
            init: CenterInit::RandomNormal,
            seed: 3,
        };
        let out = pretrain_centers(&corpus, &cfg).unwrap();
        assert_eq!(out.centers.k(), 2);
    }

    #[test]
    fn purity_perfect_and_degenerate() {
        // Centers exactly on two well-separated points, labels permuted.
        let c = centers_of(&[vec![10.0, 0.0], vec![0.0, 10.0]]);
        let behaviors = Matrix::from_rows(&[
            vec![9.0, 0.0],
            vec![0.0, 9.0],
            vec![11.0, 1.0],
            vec![1.0, 11.0],
        ]);
        let labels = [1, 0, 1, 0]; // permutation of the natural labels
        assert_eq!(purity(&c, &behaviors, &labels).unwrap(), 1.0);

        // Everything lands in one cluster over balanced labels: 0.5.
        let c = centers_of(&[vec![100.0, 100.0], vec![-100.0, -100.0]]);
        let behaviors = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.2, 0.8], vec![0.9, 1.1], vec![1.0, 0.9]]);
        let labels = [0, 1, 0, 1];
        assert_eq!(purity(&c, &behaviors, &labels).unwrap(), 0.5);
    }

    #[test]
    fn purity_random_labels_near_half() {
        let mut r = rng::rng(11);
        let n = 10_000;
        let behaviors = Matrix::from_fn(n, 3, |_, _| r.gen_range(-1.0..1.0));
        let labels: Vec<u32> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let c = centers_of(&[vec![0.5, 0.0, 0.0], vec![-0.5, 0.1, 0.0]]);
        let pur = purity(&c, &behaviors, &labels).unwrap();
        assert!((pur - 0.5).abs() < 0.05, "purity {pur}");
    }

    #[test]
    fn centers_round_trip_through_file() {
        let dir = std::env::temp_dir().join("mfn-centers-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.txt");
        let c = centers_of(&[vec![0.1, -0.2], vec![1e-9, 2.5]]);
        c.save(&path).unwrap();
        let loaded = InterestCenters::load(&path).unwrap();
        assert_eq!(c, loaded);
        std::fs::remove_file(&path).ok();
    }
}
