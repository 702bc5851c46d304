//! Item and sequence representation, and the dual embedding scheme: a fixed
//! table used for similarity weights and a trainable table learned with the
//! main task.
//!
//! Multiple feature fields combine into one d-vector by summation, with the
//! multi-valued entities field contributing the mean of its entity vectors.
//! That keeps every channel at dimension d regardless of its field subset.

use std::fmt;

use crate::diffcore::matrix::{self, Matrix};
use crate::diffcore::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{MfnError, Result};
use crate::rng;

const STREAM_TABLES: u64 = 0x7AB1;

/// Feature fields carried by an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Field {
    Iid,
    Cid,
    Sid,
    Bid,
    Entities,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::Iid, Field::Cid, Field::Sid, Field::Bid, Field::Entities];

    pub fn name(self) -> &'static str {
        match self {
            Field::Iid => "iid",
            Field::Cid => "cid",
            Field::Sid => "sid",
            Field::Bid => "bid",
            Field::Entities => "entities",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// One interaction item: coarse id features plus fine-grained entity ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemRecord {
    pub iid: u32,
    pub cid: u32,
    pub sid: u32,
    pub bid: u32,
    pub entities: Vec<u32>,
}

/// A user's historical behaviors in interaction-time order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSequence {
    items: Vec<ItemRecord>,
}

impl BehaviorSequence {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        if items.is_empty() {
            return Err(MfnError::Data("behavior sequence must be nonempty".into()));
        }
        Ok(BehaviorSequence { items })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Which fields a channel embeds. Nonempty, kept in canonical field order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelFieldSpec {
    fields: Vec<Field>,
}

impl ChannelFieldSpec {
    pub fn new(mut fields: Vec<Field>) -> Result<Self> {
        if fields.is_empty() {
            return Err(MfnError::Config("channel field spec must be nonempty".into()));
        }
        fields.sort();
        fields.dedup();
        Ok(ChannelFieldSpec { fields })
    }

    pub fn single(field: Field) -> Self {
        ChannelFieldSpec { fields: vec![field] }
    }

    /// All five fields; used for candidate/item profile embeddings.
    pub fn all() -> Self {
        ChannelFieldSpec {
            fields: Field::ALL.to_vec(),
        }
    }

    /// Parses a comma-separated field list, e.g. `"cid,entities"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            let field = Field::from_name(part).ok_or_else(|| {
                MfnError::Config(format!(
                    "unknown field `{part}` in channel spec (expected iid/cid/sid/bid/entities)"
                ))
            })?;
            fields.push(field);
        }
        ChannelFieldSpec::new(fields)
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }
}

impl fmt::Display for ChannelFieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.fields.iter().map(|x| x.name()).collect();
        write!(f, "{}", names.join(","))
    }
}

/// Vocabulary sizes for the five item fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabSizes {
    pub items: usize,
    pub categories: usize,
    pub shops: usize,
    pub brands: usize,
    pub entities: usize,
}

impl VocabSizes {
    pub fn of(self, field: Field) -> usize {
        match field {
            Field::Iid => self.items,
            Field::Cid => self.categories,
            Field::Sid => self.shops,
            Field::Bid => self.brands,
            Field::Entities => self.entities,
        }
    }
}

/// Checks every id of an item against the vocabularies.
pub fn validate_item(item: &ItemRecord, vocabs: &VocabSizes) -> Result<()> {
    let coarse = [
        (Field::Iid, item.iid),
        (Field::Cid, item.cid),
        (Field::Sid, item.sid),
        (Field::Bid, item.bid),
    ];
    for (field, id) in coarse {
        if id as usize >= vocabs.of(field) {
            return Err(MfnError::Lookup {
                field: field.name(),
                id,
                vocab: vocabs.of(field),
            });
        }
    }
    for &e in &item.entities {
        if e as usize >= vocabs.entities {
            return Err(MfnError::Lookup {
                field: Field::Entities.name(),
                id: e,
                vocab: vocabs.entities,
            });
        }
    }
    Ok(())
}

/// One embedding table per field, all sharing a dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTables {
    pub iid: Matrix,
    pub cid: Matrix,
    pub sid: Matrix,
    pub bid: Matrix,
    pub entities: Matrix,
}

impl FieldTables {
    /// Seeded uniform init in [-1/sqrt(d), +1/sqrt(d)].
    pub fn seeded(vocabs: &VocabSizes, dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut r = rng::rng(seed);
        FieldTables {
            iid: rng::uniform_matrix(vocabs.items, dim, bound, &mut r),
            cid: rng::uniform_matrix(vocabs.categories, dim, bound, &mut r),
            sid: rng::uniform_matrix(vocabs.shops, dim, bound, &mut r),
            bid: rng::uniform_matrix(vocabs.brands, dim, bound, &mut r),
            entities: rng::uniform_matrix(vocabs.entities, dim, bound, &mut r),
        }
    }

    pub fn table(&self, field: Field) -> &Matrix {
        match field {
            Field::Iid => &self.iid,
            Field::Cid => &self.cid,
            Field::Sid => &self.sid,
            Field::Bid => &self.bid,
            Field::Entities => &self.entities,
        }
    }

    pub fn dim(&self) -> usize {
        self.iid.cols()
    }

    pub fn vocabs(&self) -> VocabSizes {
        VocabSizes {
            items: self.iid.rows(),
            categories: self.cid.rows(),
            shops: self.sid.rows(),
            brands: self.bid.rows(),
            entities: self.entities.rows(),
        }
    }

    /// Exports `(field name, table)` pairs in canonical order.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        Field::ALL.iter().map(|&f| (f.name(), self.table(f))).collect()
    }

    pub fn from_named(mut parts: Vec<(String, Matrix)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Matrix> {
            let pos = parts
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| MfnError::Data(format!("missing `{name}` table")))?;
            Ok(parts.remove(pos).1)
        };
        let tables = FieldTables {
            iid: take("iid")?,
            cid: take("cid")?,
            sid: take("sid")?,
            bid: take("bid")?,
            entities: take("entities")?,
        };
        if !parts.is_empty() {
            return Err(MfnError::Data(format!(
                "unexpected extra table `{}`",
                parts[0].0
            )));
        }
        let d = tables.dim();
        for f in Field::ALL {
            if tables.table(f).cols() != d {
                return Err(MfnError::Data(format!(
                    "table `{}` has dimension {} but `iid` has {}",
                    f.name(),
                    tables.table(f).cols(),
                    d
                )));
            }
        }
        Ok(tables)
    }

    /// Embeds one item under a field spec: sum of the selected field rows,
    /// entities contributing the mean of their rows (zero when absent).
    pub fn embed_item(&self, item: &ItemRecord, spec: &ChannelFieldSpec) -> Result<Matrix> {
        validate_item(item, &self.vocabs())?;
        let d = self.dim();
        let mut out = Matrix::zeros(1, d);
        for &field in spec.fields() {
            match field {
                Field::Entities => {
                    if item.entities.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / item.entities.len() as f64;
                    let mut mean = vec![0.0; d];
                    for &e in &item.entities {
                        let row = self.entities.row(e as usize);
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    for (o, m) in out.data_mut().iter_mut().zip(mean) {
                        *o += m * inv;
                    }
                }
                _ => {
                    let id = match field {
                        Field::Iid => item.iid,
                        Field::Cid => item.cid,
                        Field::Sid => item.sid,
                        Field::Bid => item.bid,
                        Field::Entities => unreachable!(),
                    };
                    let row = self.table(field).row(id as usize);
                    for (o, v) in out.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Embeds a whole sequence: row t is `embed_item(items[t])`.
    pub fn embed_sequence(&self, seq: &BehaviorSequence, spec: &ChannelFieldSpec) -> Result<Matrix> {
        let mut rows = Vec::with_capacity(seq.len());
        for item in seq.items() {
            rows.push(self.embed_item(item, spec)?.data().to_vec());
        }
        Ok(Matrix::from_rows(&rows))
    }
}

/// Handles to the trainable per-field tables inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct TrainableTables {
    pub iid: ParamId,
    pub cid: ParamId,
    pub sid: ParamId,
    pub bid: ParamId,
    pub entities: ParamId,
}

impl TrainableTables {
    /// Registers five seeded tables in the store under `emb:<field>` names.
    pub fn register(store: &mut ParamStore, vocabs: &VocabSizes, dim: usize, seed: u64) -> Self {
        let seeded = FieldTables::seeded(vocabs, dim, rng::derive(seed, STREAM_TABLES));
        TrainableTables {
            iid: store.add("emb:iid", seeded.iid),
            cid: store.add("emb:cid", seeded.cid),
            sid: store.add("emb:sid", seeded.sid),
            bid: store.add("emb:bid", seeded.bid),
            entities: store.add("emb:entities", seeded.entities),
        }
    }

    pub fn id_of(&self, field: Field) -> ParamId {
        match field {
            Field::Iid => self.iid,
            Field::Cid => self.cid,
            Field::Sid => self.sid,
            Field::Bid => self.bid,
            Field::Entities => self.entities,
        }
    }

    /// Snapshot of the current values as plain tables.
    pub fn snapshot(&self, store: &ParamStore) -> FieldTables {
        FieldTables {
            iid: store.value(self.iid).clone(),
            cid: store.value(self.cid).clone(),
            sid: store.value(self.sid).clone(),
            bid: store.value(self.bid).clone(),
            entities: store.value(self.entities).clone(),
        }
    }
}

/// The two parallel embedding tables: a fixed one (never optimized) and a
/// trainable one living in the parameter store.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    pub dim: usize,
    pub fixed: FieldTables,
    pub trainable: TrainableTables,
}

impl EmbeddingBundle {
    pub fn new(fixed: FieldTables, store: &mut ParamStore, seed: u64) -> Self {
        let dim = fixed.dim();
        let vocabs = fixed.vocabs();
        let trainable = TrainableTables::register(store, &vocabs, dim, seed);
        EmbeddingBundle {
            dim,
            fixed,
            trainable,
        }
    }

    pub fn vocabs(&self) -> VocabSizes {
        self.fixed.vocabs()
    }
}

/// Pretrains the fixed tables under the auxiliary CTR task: trains a vanilla
/// mean-pooling Embedding&MLP model for `embed_steps` mini-batch steps on the
/// corpus, then freezes its item-field tables as the fixed tables.
///
/// With zero steps this returns the seeded random initialization unchanged.
pub fn pretrain_fixed_embeddings(
    corpus: &crate::synthgen::Dataset,
    rc: &crate::config::RunConfig,
) -> Result<FieldTables> {
    use crate::baseline::{BaselineConfig, BaselineModel};
    use crate::diffcore::AdamConfig;
    use crate::traineval::{fit, FitConfig, StopRule};

    if corpus.is_empty() {
        return Err(MfnError::Data("embedding pretraining corpus is empty".into()));
    }
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
    if rc.embed_steps > 0 {
        fit(
            &mut model,
            &corpus.examples,
            &FitConfig {
                stop: StopRule::Steps(rc.embed_steps),
                batch_size: rc.embed_batch,
                adam: AdamConfig {
                    lr: rc.embed_lr,
                    ..AdamConfig::default()
                },
                seed: rc.seed,
            },
        )?;
    }
    Ok(model.export_tables())
}

/// Writes field tables in the embedding text format (one file for all five
/// tables, tokens `<field>:<id>`).
pub fn save_embeddings(tables: &FieldTables, path: impl AsRef<std::path::Path>) -> Result<()> {
    crate::persist::save_tables(path, &tables.named())
}

/// Loads field tables from the embedding text format.
pub fn load_embeddings(path: impl AsRef<std::path::Path>) -> Result<FieldTables> {
    FieldTables::from_named(crate::persist::load_tables(path)?)
}

/// Differentiable sequence embedding from the trainable tables: gathers rows
/// per field and sums, with per-item entity means.
pub fn embed_sequence_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &TrainableTables,
    items: &[ItemRecord],
    spec: &ChannelFieldSpec,
    dim: usize,
) -> Result<NodeId> {
    assert!(!items.is_empty(), "cannot embed an empty sequence");
    let mut total: Option<NodeId> = None;
    for &field in spec.fields() {
        let table = tape.param(store, tables.id_of(field));
        let part = match field {
            Field::Entities => {
                let mut item_rows = Vec::with_capacity(items.len());
                for item in items {
                    if item.entities.is_empty() {
                        item_rows.push(tape.constant(Matrix::zeros(1, dim)));
                    } else {
                        let ids: Vec<usize> = item.entities.iter().map(|&e| e as usize).collect();
                        let rows = tape.gather(table, &ids)?;
                        item_rows.push(tape.col_mean(rows));
                    }
                }
                tape.stack_rows(&item_rows)?
            }
            _ => {
                let ids: Vec<usize> = items
                    .iter()
                    .map(|it| match field {
                        Field::Iid => it.iid as usize,
                        Field::Cid => it.cid as usize,
                        Field::Sid => it.sid as usize,
                        Field::Bid => it.bid as usize,
                        Field::Entities => unreachable!(),
                    })
                    .collect();
                tape.gather(table, &ids)?
            }
        };
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok(total.expect("spec is nonempty"))
}

/// Differentiable single-item embedding (a 1 x d node).
pub fn embed_item_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &TrainableTables,
    item: &ItemRecord,
    spec: &ChannelFieldSpec,
    dim: usize,
) -> Result<NodeId> {
    embed_sequence_on_tape(tape, store, tables, std::slice::from_ref(item), spec, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocabs() -> VocabSizes {
        VocabSizes {
            items: 6,
            categories: 4,
            shops: 3,
            brands: 3,
            entities: 5,
        }
    }

    fn item(iid: u32, cid: u32, entities: &[u32]) -> ItemRecord {
        ItemRecord {
            iid,
            cid,
            sid: 0,
            bid: 0,
            entities: entities.to_vec(),
        }
    }

    #[test]
    fn single_field_is_table_row() {
        let tables = FieldTables::seeded(&small_vocabs(), 4, 9);
        let spec = ChannelFieldSpec::single(Field::Cid);
        let e = tables.embed_item(&item(0, 2, &[]), &spec).unwrap();
        assert_eq!(e.data(), tables.cid.row(2));
    }

    #[test]
    fn zero_bid_row_is_additive_identity() {
        let mut tables = FieldTables::seeded(&small_vocabs(), 4, 10);
        tables.bid.row_mut(1).fill(0.0);
        let it = ItemRecord {
            iid: 0,
            cid: 3,
            sid: 0,
            bid: 1,
            entities: vec![],
        };
        let spec_cb = ChannelFieldSpec::parse("cid,bid").unwrap();
        let spec_c = ChannelFieldSpec::single(Field::Cid);
        let a = tables.embed_item(&it, &spec_cb).unwrap();
        let b = tables.embed_item(&it, &spec_c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entities_embed_as_mean() {
        let tables = FieldTables::seeded(&small_vocabs(), 4, 11);
        let spec = ChannelFieldSpec::single(Field::Entities);
        let e = tables.embed_item(&item(0, 0, &[1, 3]), &spec).unwrap();
        for j in 0..4 {
            let want = (tables.entities.get(1, j) + tables.entities.get(3, j)) / 2.0;
            assert!((e.get(0, j) - want).abs() < 1e-15);
        }
        // Empty entity list with entities as the only field: zero vector.
        let z = tables.embed_item(&item(0, 0, &[]), &spec).unwrap();
        assert_eq!(z, Matrix::zeros(1, 4));
    }

    #[test]
    fn embed_is_linear_over_fields() {
        let tables = FieldTables::seeded(&small_vocabs(), 4, 12);
        let it = item(2, 1, &[0, 4]);
        let spec_ab = ChannelFieldSpec::parse("cid,entities").unwrap();
        let a = tables
            .embed_item(&it, &ChannelFieldSpec::single(Field::Cid))
            .unwrap();
        let b = tables
            .embed_item(&it, &ChannelFieldSpec::single(Field::Entities))
            .unwrap();
        let both = tables.embed_item(&it, &spec_ab).unwrap();
        let summed = matrix::add(&a, &b).unwrap();
        assert_eq!(both, summed);
    }

    #[test]
    fn sequence_rows_match_item_embeddings() {
        let tables = FieldTables::seeded(&small_vocabs(), 4, 13);
        let spec = ChannelFieldSpec::all();
        let items = vec![item(0, 1, &[2]), item(3, 2, &[]), item(5, 0, &[1, 2, 4])];
        let seq = BehaviorSequence::new(items.clone()).unwrap();
        let m = tables.embed_sequence(&seq, &spec).unwrap();
        assert_eq!(m.rows(), 3);
        for (t, it) in items.iter().enumerate() {
            let row = tables.embed_item(it, &spec).unwrap();
            assert_eq!(m.row(t), row.data(), "row {t}");
        }
        // Permuting items permutes rows identically.
        let permuted = BehaviorSequence::new(vec![items[2].clone(), items[0].clone(), items[1].clone()])
            .unwrap();
        let pm = tables.embed_sequence(&permuted, &spec).unwrap();
        assert_eq!(pm.row(0), m.row(2));
        assert_eq!(pm.row(1), m.row(0));
        assert_eq!(pm.row(2), m.row(1));
    }

    #[test]
    fn out_of_vocab_names_field_and_id() {
        let tables = FieldTables::seeded(&small_vocabs(), 4, 14);
        let bad = item(0, 9, &[]);
        let err = tables
            .embed_item(&bad, &ChannelFieldSpec::single(Field::Cid))
            .unwrap_err()
            .to_string();
        assert!(err.contains("cid") && err.contains('9'), "{err}");
    }

    #[test]
    fn tape_embedding_matches_plain_path() {
        let vocabs = small_vocabs();
        let mut store = ParamStore::new();
        let trainable = TrainableTables::register(&mut store, &vocabs, 4, 77);
        let snapshot = trainable.snapshot(&store);
        let spec = ChannelFieldSpec::parse("cid,entities").unwrap();
        let items = vec![item(0, 1, &[2, 3]), item(1, 0, &[])];
        let seq = BehaviorSequence::new(items.clone()).unwrap();

        let mut tape = Tape::new();
        let node =
            embed_sequence_on_tape(&mut tape, &store, &trainable, &items, &spec, 4).unwrap();
        let plain = snapshot.embed_sequence(&seq, &spec).unwrap();
        assert!(tape.value(node).max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn empty_spec_rejected() {
        assert!(ChannelFieldSpec::new(vec![]).is_err());
        assert!(ChannelFieldSpec::parse("cid,wat").is_err());
        assert_eq!(ChannelFieldSpec::parse("entities,cid").unwrap().to_string(), "cid,entities");
    }
}
