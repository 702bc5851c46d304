//! The multi-interest network: similarity interests over pretrained centers,
//! combination interests via multi-head self-attention, target-aware
//! aggregation of both interest groups, and a sigmoid CTR head.
//!
//! The network is organized as channels. Each channel embeds its own field
//! subset (two by default: categories, then fine-grained entities), extracts
//! K similarity and K combination interests from the behavior sequence, and
//! pools them against the candidate item. Channel outputs are concatenated
//! with user, item and context blocks and fed to the head MLP.

use crate::centers::{self, InterestCenters};
use crate::diffcore::matrix::{self, Matrix};
use crate::diffcore::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{MfnError, Result};
use crate::features::{
    embed_item_on_tape, embed_sequence_on_tape, ChannelFieldSpec, EmbeddingBundle, FieldTables,
};
use crate::rng;
use crate::synthgen::LabeledExample;

const STREAM_MODEL: u64 = 0x30DE1;

/// Probability clamp inside the cross-entropy loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// A plain feed-forward stack: linear layers with swish between them and a
/// linear final layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `in_dim -> hidden... -> out_dim` weights under
    /// `<prefix>.l<i>.{w,b}`. Weights are uniform +-1/sqrt(fan_in), biases 0.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        r: &mut rand_chacha::ChaCha8Rng,
    ) -> Mlp {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[i] as f64).sqrt();
            let w = store.add(
                format!("{prefix}.l{i}.w"),
                rng::uniform_matrix(dims[i], dims[i + 1], bound, r),
            );
            let b = store.add(format!("{prefix}.l{i}.b"), Matrix::zeros(1, dims[i + 1]));
            layers.push((w, b));
        }
        Mlp { layers }
    }

    /// Applies the stack to an n x in_dim node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let lin = tape.matmul(h, wn)?;
            h = tape.add_row_broadcast(lin, bn)?;
            if i != last {
                h = tape.swish(h);
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn final_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().expect("mlp has at least one layer")
    }
}

/// Per-head projections plus the output projection of the self-attention
/// block. No positional encoding: interest extraction treats the sequence as
/// a set.
#[derive(Clone, Debug)]
pub struct MsaParams {
    heads: Vec<(ParamId, ParamId, ParamId)>,
    w_out: ParamId,
    d_head: usize,
}

impl MsaParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        h: usize,
        r: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<MsaParams> {
        if h == 0 || d % h != 0 {
            return Err(MfnError::Config(format!(
                "attention heads ({h}) must divide the embedding dimension ({d})"
            )));
        }
        let d_head = d / h;
        let bound = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let wq = store.add(format!("{prefix}.h{i}.wq"), rng::uniform_matrix(d, d_head, bound, r));
            let wk = store.add(format!("{prefix}.h{i}.wk"), rng::uniform_matrix(d, d_head, bound, r));
            let wv = store.add(format!("{prefix}.h{i}.wv"), rng::uniform_matrix(d, d_head, bound, r));
            heads.push((wq, wk, wv));
        }
        let w_out = store.add(format!("{prefix}.wo"), rng::uniform_matrix(d, d, bound, r));
        Ok(MsaParams { heads, w_out, d_head })
    }

    /// Scaled dot-product attention per head, heads concatenated, then the
    /// output projection. Input and output are N x d.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut concat: Option<NodeId> = None;
        for &(wq, wk, wv) in &self.heads {
            let wq = tape.param(store, wq);
            let wk = tape.param(store, wk);
            let wv = tape.param(store, wv);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled);
            let head_out = tape.matmul(weights, v)?;
            concat = Some(match concat {
                None => head_out,
                Some(c) => tape.concat_cols(c, head_out)?,
            });
        }
        let h = concat.expect("at least one head");
        let wo = tape.param(store, self.w_out);
        tape.matmul(h, wo)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.heads.iter().flat_map(|&(q, k, v)| [q, k, v]).collect();
        ids.push(self.w_out);
        ids
    }
}

/// Interest centers of a channel: frozen after pretraining by default, or a
/// trainable parameter when fine-tuning is enabled.
#[derive(Clone, Debug)]
pub enum CentersMode {
    Frozen(InterestCenters),
    Trainable(ParamId),
}

/// Parameters of the combination (self-attentive) path of one channel.
#[derive(Clone, Debug)]
pub struct CombinationParams {
    pub msa: MsaParams,
    /// d_h x d
    pub w1: ParamId,
    /// d_h x K
    pub w2: ParamId,
    pub agg_ffn: Mlp,
}

/// One channel: a field subset with its own centers, attention stack and
/// aggregation networks.
#[derive(Clone, Debug)]
pub struct ChannelParams {
    pub spec: ChannelFieldSpec,
    pub centers: CentersMode,
    pub k: usize,
    pub agg_ffn_sim: Mlp,
    pub combination: Option<CombinationParams>,
}

/// Architecture settings for [`MfnModel`].
#[derive(Clone, Debug)]
pub struct MfnConfig {
    pub dim: usize,
    pub d_h: usize,
    pub k: usize,
    pub heads: usize,
    pub channels: Vec<ChannelFieldSpec>,
    pub users: usize,
    pub contexts: usize,
    pub head_hidden: Vec<usize>,
    /// Weight of the entropy auxiliary term added to the batch loss.
    pub lambda_e: f64,
    pub freeze_centers: bool,
    /// The combination path can be dropped entirely (ablation).
    pub use_combination: bool,
    pub seed: u64,
}

/// The full model: parameter store, dual embeddings and channels.
#[derive(Clone, Debug)]
pub struct MfnModel {
    pub cfg: MfnConfig,
    pub store: ParamStore,
    pub bundle: EmbeddingBundle,
    pub user_table: ParamId,
    pub channels: Vec<ChannelParams>,
    pub head: Mlp,
}

/// The stacked interest matrix of one channel: K similarity rows over K
/// combination rows (2K x d), or K rows when the combination path is off.
pub struct InterestMatrix {
    pub r_s: NodeId,
    pub r_c: Option<NodeId>,
    pub stacked: NodeId,
}

/// Node handles exposed by an instrumented forward pass of one channel.
pub struct ChannelTrace {
    pub p: NodeId,
    pub a: Option<NodeId>,
    pub w_sim: NodeId,
    pub w_comb: Option<NodeId>,
    pub interests: InterestMatrix,
    pub entropy: NodeId,
    pub out: NodeId,
}

/// Node handles exposed by an instrumented forward pass.
pub struct ForwardTrace {
    pub channels: Vec<ChannelTrace>,
    pub logit: NodeId,
    pub prob: NodeId,
}

/// Similarity path: `P = softmax_rows(E C^T)`, `R_s = P^T 𝓔-like`.
/// Returns `(P, R_s)`.
pub fn similarity_interests_on_tape(
    tape: &mut Tape,
    seq_fixed: NodeId,
    seq_trainable: NodeId,
    centers: NodeId,
) -> Result<(NodeId, NodeId)> {
    let p = centers::assignment_probs_on_tape(tape, seq_fixed, centers)?;
    let pt = tape.transpose(p);
    let r_s = tape.matmul(pt, seq_trainable)?;
    Ok((p, r_s))
}

/// Combination path: attention over the trainable sequence embedding gives a
/// K x N weight matrix A (rows are distributions over behaviors), and
/// `R_c = A * seq`. Returns `(A, R_c)`.
pub fn combination_interests_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    seq_trainable: NodeId,
    comb: &CombinationParams,
) -> Result<(NodeId, NodeId)> {
    let h = comb.msa.forward(tape, store, seq_trainable)?;
    let ht = tape.transpose(h);
    let w1 = tape.param(store, comb.w1);
    let pre = tape.matmul(w1, ht)?;
    let act = tape.swish(pre);
    let w2 = tape.param(store, comb.w2);
    let w2t = tape.transpose(w2);
    let logits = tape.matmul(w2t, act)?;
    let a = tape.softmax_rows(logits);
    let r_c = tape.matmul(a, seq_trainable)?;
    Ok((a, r_c))
}

/// Candidate-conditioned pooling of K interest rows: a feed-forward net
/// scores each row against the candidate, weights are softmax-normalized.
/// Returns `(weights 1xK, pooled 1xd)`.
pub fn attention_pool(
    tape: &mut Tape,
    store: &ParamStore,
    interests: NodeId,
    candidate: NodeId,
    ffn: &Mlp,
) -> Result<(NodeId, NodeId)> {
    let k = tape.value(interests).rows();
    let cand_rows = tape.broadcast_row(candidate, k)?;
    let x = tape.concat_cols(interests, cand_rows)?;
    let logits = ffn.forward(tape, store, x)?;
    let logits_row = tape.transpose(logits);
    let weights = tape.softmax_rows(logits_row);
    let pooled = tape.matmul(weights, interests)?;
    Ok((weights, pooled))
}

fn one_hot(ctx: u32, n: usize) -> Matrix {
    let mut m = Matrix::zeros(1, n);
    m.set(0, ctx as usize, 1.0);
    m
}

impl MfnModel {
    pub fn new(
        cfg: MfnConfig,
        fixed: FieldTables,
        channel_centers: Vec<InterestCenters>,
    ) -> Result<MfnModel> {
        if cfg.channels.is_empty() {
            return Err(MfnError::Config("model needs at least one channel".into()));
        }
        if channel_centers.len() != cfg.channels.len() {
            return Err(MfnError::Config(format!(
                "{} channels but {} center matrices",
                cfg.channels.len(),
                channel_centers.len()
            )));
        }
        if fixed.dim() != cfg.dim {
            return Err(MfnError::Config(format!(
                "fixed tables have dimension {}, config says {}",
                fixed.dim(),
                cfg.dim
            )));
        }
        if cfg.k == 0 {
            return Err(MfnError::Config("k must be at least 1".into()));
        }
        for (i, c) in channel_centers.iter().enumerate() {
            if c.k() != cfg.k || c.dim() != cfg.dim {
                return Err(MfnError::Config(format!(
                    "channel {i} centers are {}x{}, expected {}x{}",
                    c.k(),
                    c.dim(),
                    cfg.k,
                    cfg.dim
                )));
            }
        }

        let mut store = ParamStore::new();
        let bundle = EmbeddingBundle::new(fixed, &mut store, cfg.seed);
        let mut r = rng::rng(rng::derive(cfg.seed, STREAM_MODEL));
        let d = cfg.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let user_table = store.add("user", rng::uniform_matrix(cfg.users, d, bound, &mut r));

        let mut channels = Vec::with_capacity(cfg.channels.len());
        for (i, (spec, centers)) in cfg.channels.iter().zip(channel_centers).enumerate() {
            let centers = if cfg.freeze_centers {
                CentersMode::Frozen(centers)
            } else {
                CentersMode::Trainable(
                    store.add(format!("ch{i}.centers"), centers.matrix().clone()),
                )
            };
            let combination = if cfg.use_combination {
                let msa = MsaParams::register(&mut store, &format!("ch{i}.msa"), d, cfg.heads, &mut r)?;
                let w1 = store.add(
                    format!("ch{i}.w1"),
                    rng::uniform_matrix(cfg.d_h, d, 1.0 / (d as f64).sqrt(), &mut r),
                );
                let w2 = store.add(
                    format!("ch{i}.w2"),
                    rng::uniform_matrix(cfg.d_h, cfg.k, 1.0 / (cfg.d_h as f64).sqrt(), &mut r),
                );
                let agg_ffn = Mlp::register(
                    &mut store,
                    &format!("ch{i}.agg_comb"),
                    2 * d,
                    &[cfg.d_h],
                    1,
                    &mut r,
                );
                Some(CombinationParams { msa, w1, w2, agg_ffn })
            } else {
                None
            };
            let agg_ffn_sim =
                Mlp::register(&mut store, &format!("ch{i}.agg_sim"), 2 * d, &[cfg.d_h], 1, &mut r);
            channels.push(ChannelParams {
                spec: spec.clone(),
                centers,
                k: cfg.k,
                agg_ffn_sim,
                combination,
            });
        }

        let head_in = cfg.channels.len() * d + d + d + cfg.contexts;
        let head_hidden = cfg.head_hidden.clone();
        let head = Mlp::register(&mut store, "head", head_in, &head_hidden, 1, &mut r);

        Ok(MfnModel {
            cfg,
            store,
            bundle,
            user_table,
            channels,
            head,
        })
    }

    fn validate_example(&self, ex: &LabeledExample) -> Result<()> {
        if ex.user as usize >= self.cfg.users {
            return Err(MfnError::Lookup { field: "user", id: ex.user, vocab: self.cfg.users });
        }
        if ex.ctx as usize >= self.cfg.contexts {
            return Err(MfnError::Lookup { field: "ctx", id: ex.ctx, vocab: self.cfg.contexts });
        }
        let vocabs = self.bundle.vocabs();
        for it in ex.seq.iter().chain(std::iter::once(&ex.cand)) {
            crate::features::validate_item(it, &vocabs)?;
        }
        if ex.seq.is_empty() {
            return Err(MfnError::Data("behavior sequence is empty".into()));
        }
        Ok(())
    }

    /// Builds the full forward pass of one example on the given tape and
    /// returns handles to every intermediate distribution.
    pub fn forward_on_tape(&self, tape: &mut Tape, ex: &LabeledExample) -> Result<ForwardTrace> {
        self.validate_example(ex)?;
        let d = self.cfg.dim;
        let store = &self.store;

        let mut channel_traces = Vec::with_capacity(self.channels.len());
        let mut head_parts: Vec<NodeId> = Vec::new();
        for ch in &self.channels {
            let fixed_emb = self
                .bundle
                .fixed
                .embed_sequence(&crate::features::BehaviorSequence::new(ex.seq.clone())?, &ch.spec)?;
            let seq_fixed = tape.constant(fixed_emb);
            let seq_train =
                embed_sequence_on_tape(tape, store, &self.bundle.trainable, &ex.seq, &ch.spec, d)?;
            let centers_node = match &ch.centers {
                CentersMode::Frozen(c) => tape.constant(c.matrix().clone()),
                CentersMode::Trainable(id) => tape.param(store, *id),
            };

            let (p, r_s) = similarity_interests_on_tape(tape, seq_fixed, seq_train, centers_node)?;
            let entropy = centers::entropy_loss_on_tape(tape, p)?;

            let comb_nodes = match &ch.combination {
                Some(cp) => Some((combination_interests_on_tape(tape, store, seq_train, cp)?, cp)),
                None => None,
            };

            let cand =
                embed_item_on_tape(tape, store, &self.bundle.trainable, &ex.cand, &ch.spec, d)?;

            let (w_sim, out_sim) = attention_pool(tape, store, r_s, cand, &ch.agg_ffn_sim)?;
            let (trace_comb, out) = match comb_nodes {
                Some(((a, r_c), cp)) => {
                    let (w_comb, out_comb) = attention_pool(tape, store, r_c, cand, &cp.agg_ffn)?;
                    let combined = tape.add(out_sim, out_comb)?;
                    (Some((a, w_comb, r_c)), combined)
                }
                None => (None, out_sim),
            };

            let (r_c_node, a_node, w_comb_node) = match trace_comb {
                Some((a, w, r_c)) => (Some(r_c), Some(a), Some(w)),
                None => (None, None, None),
            };
            let stacked = match r_c_node {
                Some(r_c) => tape.stack_rows(&[r_s, r_c])?,
                None => r_s,
            };

            head_parts.push(out);
            channel_traces.push(ChannelTrace {
                p,
                a: a_node,
                w_sim,
                w_comb: w_comb_node,
                interests: InterestMatrix { r_s, r_c: r_c_node, stacked },
                entropy,
                out,
            });
        }

        // Profile blocks: user embedding, candidate all-field embedding,
        // context one-hot.
        let user_tab = tape.param(store, self.user_table);
        let x_u = tape.gather(user_tab, &[ex.user as usize])?;
        let x_i = embed_item_on_tape(
            tape,
            store,
            &self.bundle.trainable,
            &ex.cand,
            &ChannelFieldSpec::all(),
            d,
        )?;
        let x_s = tape.constant(one_hot(ex.ctx, self.cfg.contexts));

        let mut head_in = head_parts[0];
        for &part in &head_parts[1..] {
            head_in = tape.concat_cols(head_in, part)?;
        }
        head_in = tape.concat_cols(head_in, x_u)?;
        head_in = tape.concat_cols(head_in, x_i)?;
        head_in = tape.concat_cols(head_in, x_s)?;

        let logit = self.head.forward(tape, store, head_in)?;
        let prob = tape.sigmoid(logit);
        Ok(ForwardTrace { channels: channel_traces, logit, prob })
    }

    /// Scores one example; the label never enters the computation.
    pub fn forward(&self, ex: &LabeledExample) -> Result<f64> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, ex)?;
        Ok(tape.value(trace.prob).item())
    }

    /// Instrumented scoring: returns the tape so intermediate distributions
    /// can be inspected.
    pub fn forward_traced(&self, ex: &LabeledExample) -> Result<(Tape, ForwardTrace)> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, ex)?;
        Ok((tape, trace))
    }

    pub fn score_batch(&self, examples: &[LabeledExample]) -> Result<Vec<f64>> {
        examples.iter().map(|ex| self.forward(ex)).collect()
    }

    /// Mean binary cross entropy of a batch (plus the optional entropy
    /// auxiliary term), assembled on the tape. Returns the loss node and the
    /// per-example traces.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[LabeledExample],
    ) -> Result<(NodeId, Vec<ForwardTrace>)> {
        if batch.is_empty() {
            return Err(MfnError::Data("batch must be nonempty".into()));
        }
        let mut traces = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        let mut entropies = Vec::new();
        for ex in batch {
            let trace = self.forward_on_tape(tape, ex)?;
            // y is exactly 0 or 1, so the cross entropy reduces to one term.
            let term = if ex.label == 1 {
                tape.ln_clamped(trace.prob, PROB_CLAMP)
            } else {
                let one = tape.scalar(1.0);
                let q = tape.sub(one, trace.prob)?;
                tape.ln_clamped(q, PROB_CLAMP)
            };
            losses.push(tape.scale(term, -1.0));
            entropies.extend(trace.channels.iter().map(|c| c.entropy));
            traces.push(trace);
        }
        let stacked = tape.stack_rows(&losses)?;
        let mut loss = tape.mean_all(stacked);
        if self.cfg.lambda_e != 0.0 {
            let ent = tape.stack_rows(&entropies)?;
            let ent_mean = tape.mean_all(ent);
            let weighted = tape.scale(ent_mean, self.cfg.lambda_e);
            loss = tape.add(loss, weighted)?;
        }
        Ok((loss, traces))
    }

    /// Batch loss value without gradients.
    pub fn batch_loss(&self, batch: &[LabeledExample]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss_on_tape(&mut tape, batch)?;
        Ok(tape.value(loss).item())
    }

    /// Every table the checkpoint must carry: fixed tables, frozen centers,
    /// and all store parameters, in a stable order.
    pub fn named_tables(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (name, m) in self.bundle.fixed.named() {
            out.push((format!("fixed:{name}"), m.clone()));
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if let CentersMode::Frozen(c) = &ch.centers {
                out.push((format!("centers:ch{i}"), c.matrix().clone()));
            }
        }
        for id in self.store.ids() {
            out.push((self.store.name(id).to_string(), self.store.value(id).clone()));
        }
        out
    }

    /// Overwrites every value from a checkpoint's table list. The set of
    /// names must match exactly.
    pub fn load_named_tables(&mut self, tables: Vec<(String, Matrix)>) -> Result<()> {
        let mut remaining: std::collections::BTreeMap<String, Matrix> = tables.into_iter().collect();
        let mut take = |name: &str| -> Result<Matrix> {
            remaining
                .remove(name)
                .ok_or_else(|| MfnError::Data(format!("checkpoint is missing table `{name}`")))
        };
        let mut fixed = self.bundle.fixed.clone();
        fixed.iid = take("fixed:iid")?;
        fixed.cid = take("fixed:cid")?;
        fixed.sid = take("fixed:sid")?;
        fixed.bid = take("fixed:bid")?;
        fixed.entities = take("fixed:entities")?;
        self.bundle.fixed = fixed;
        for (i, ch) in self.channels.iter_mut().enumerate() {
            if let CentersMode::Frozen(_) = ch.centers {
                ch.centers = CentersMode::Frozen(InterestCenters::new(take(&format!("centers:ch{i}"))?)?);
            }
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            let m = take(&name)?;
            if m.shape() != self.store.value(id).shape() {
                return Err(MfnError::Data(format!(
                    "checkpoint table `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    self.store.value(id).shape()
                )));
            }
            self.store.set_value(id, m);
        }
        if let Some((name, _)) = remaining.into_iter().next() {
            return Err(MfnError::Data(format!("checkpoint has unexpected table `{name}`")));
        }
        Ok(())
    }
}
