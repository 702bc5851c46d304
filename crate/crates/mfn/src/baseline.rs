//! The vanilla mean-pooling CTR model: one trainable embedding table set,
//! behaviors averaged into a single user vector, a small MLP head.
//!
//! Serves two roles: the Base model in comparisons, and the auxiliary task
//! that pretrains the fixed embedding tables.

use crate::diffcore::{Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::error::{MfnError, Result};
use crate::features::{
    embed_item_on_tape, embed_sequence_on_tape, ChannelFieldSpec, FieldTables, TrainableTables,
    VocabSizes,
};
use crate::model::{Mlp, PROB_CLAMP};
use crate::rng;
use crate::synthgen::LabeledExample;

const STREAM_BASE: u64 = 0xBA5E;

#[derive(Clone, Debug)]
pub struct BaselineConfig {
    pub dim: usize,
    pub users: usize,
    pub contexts: usize,
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

/// Embedding&MLP with mean pooling over the behavior sequence.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub cfg: BaselineConfig,
    pub vocabs: VocabSizes,
    pub store: ParamStore,
    pub tables: TrainableTables,
    pub user_table: ParamId,
    pub head: Mlp,
}

impl BaselineModel {
    pub fn new(vocabs: VocabSizes, cfg: BaselineConfig) -> BaselineModel {
        let mut store = ParamStore::new();
        let tables = TrainableTables::register(&mut store, &vocabs, cfg.dim, cfg.seed);
        let mut r = rng::rng(rng::derive(cfg.seed, STREAM_BASE));
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        let user_table = store.add("user", rng::uniform_matrix(cfg.users, cfg.dim, bound, &mut r));
        let head_in = cfg.dim + cfg.dim + cfg.dim + cfg.contexts;
        let head_hidden = cfg.head_hidden.clone();
        let head = Mlp::register(&mut store, "head", head_in, &head_hidden, 1, &mut r);
        BaselineModel {
            cfg,
            vocabs,
            store,
            tables,
            user_table,
            head,
        }
    }

    fn validate_example(&self, ex: &LabeledExample) -> Result<()> {
        if ex.user as usize >= self.cfg.users {
            return Err(MfnError::Lookup { field: "user", id: ex.user, vocab: self.cfg.users });
        }
        if ex.ctx as usize >= self.cfg.contexts {
            return Err(MfnError::Lookup { field: "ctx", id: ex.ctx, vocab: self.cfg.contexts });
        }
        if ex.seq.is_empty() {
            return Err(MfnError::Data("behavior sequence is empty".into()));
        }
        let vocabs = self.vocabs;
        for it in ex.seq.iter().chain(std::iter::once(&ex.cand)) {
            crate::features::validate_item(it, &vocabs)?;
        }
        Ok(())
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, ex: &LabeledExample) -> Result<NodeId> {
        self.validate_example(ex)?;
        let d = self.cfg.dim;
        let all = ChannelFieldSpec::all();
        let seq = embed_sequence_on_tape(tape, &self.store, &self.tables, &ex.seq, &all, d)?;
        let pooled = tape.col_mean(seq);
        let cand = embed_item_on_tape(tape, &self.store, &self.tables, &ex.cand, &all, d)?;
        let user_tab = tape.param(&self.store, self.user_table);
        let x_u = tape.gather(user_tab, &[ex.user as usize])?;
        let mut ctx = Matrix::zeros(1, self.cfg.contexts);
        ctx.set(0, ex.ctx as usize, 1.0);
        let x_s = tape.constant(ctx);

        let mut h = tape.concat_cols(pooled, cand)?;
        h = tape.concat_cols(h, x_u)?;
        h = tape.concat_cols(h, x_s)?;
        let logit = self.head.forward(tape, &self.store, h)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn forward(&self, ex: &LabeledExample) -> Result<f64> {
        let mut tape = Tape::new();
        let prob = self.forward_on_tape(&mut tape, ex)?;
        Ok(tape.value(prob).item())
    }

    pub fn score_batch(&self, examples: &[LabeledExample]) -> Result<Vec<f64>> {
        examples.iter().map(|ex| self.forward(ex)).collect()
    }

    pub fn batch_loss_on_tape(&self, tape: &mut Tape, batch: &[LabeledExample]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(MfnError::Data("batch must be nonempty".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let prob = self.forward_on_tape(tape, ex)?;
            let term = if ex.label == 1 {
                tape.ln_clamped(prob, PROB_CLAMP)
            } else {
                let one = tape.scalar(1.0);
                let q = tape.sub(one, prob)?;
                tape.ln_clamped(q, PROB_CLAMP)
            };
            losses.push(tape.scale(term, -1.0));
        }
        let stacked = tape.stack_rows(&losses)?;
        Ok(tape.mean_all(stacked))
    }

    /// Snapshot of the item-field tables (the pretrained-embedding export).
    pub fn export_tables(&self) -> FieldTables {
        self.tables.snapshot(&self.store)
    }

    pub fn named_tables(&self) -> Vec<(String, Matrix)> {
        self.store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.value(id).clone()))
            .collect()
    }

    pub fn load_named_tables(&mut self, tables: Vec<(String, Matrix)>) -> Result<()> {
        let mut remaining: std::collections::BTreeMap<String, Matrix> = tables.into_iter().collect();
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            let m = remaining
                .remove(&name)
                .ok_or_else(|| MfnError::Data(format!("checkpoint is missing table `{name}`")))?;
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
