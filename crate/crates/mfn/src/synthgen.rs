//! Deterministic synthetic e-commerce world: multi-interest users, behavior
//! sequences, and labeled CTR examples with ground-truth archetype tags.
//!
//! An archetype is a coherent slice of the catalog (categories, entities,
//! shops, brands partitioned by residue classes). Users hold a sparse mixture
//! over archetypes; their behaviors and positive candidates are drawn from
//! the mixture and negatives from its complement, so both similarity
//! structure (shared categories/entities) and combination structure
//! (archetype co-occurrence within one user) carry signal.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{MfnError, Result};
use crate::features::{BehaviorSequence, ItemRecord, VocabSizes};
use crate::rng;

const STREAM_WORLD: u64 = 0x501D;
const STREAM_USERS: u64 = 0x05E5;
const STREAM_DATA: u64 = 0xDA7A;

/// Everything the generator needs to build a world and its datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub items: usize,
    pub categories: usize,
    pub shops: usize,
    pub brands: usize,
    pub entities: usize,
    pub contexts: usize,
    /// Number of latent interest archetypes (G).
    pub archetypes: usize,
    /// Number of users (M).
    pub users: usize,
    /// Behavior sequence length (N).
    pub seq_len: usize,
    pub train_examples_per_user: usize,
    pub test_examples_per_user: usize,
    pub positive_rate: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("items", self.items),
            ("categories", self.categories),
            ("shops", self.shops),
            ("brands", self.brands),
            ("entities", self.entities),
            ("contexts", self.contexts),
            ("archetypes", self.archetypes),
            ("users", self.users),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MfnError::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("positive_rate", self.positive_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MfnError::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        let g = self.archetypes;
        if self.categories < g || self.entities < g || self.items < g {
            return Err(MfnError::Config(format!(
                "vocabularies too small for {g} archetypes (need categories, entities and items >= {g})"
            )));
        }
        Ok(())
    }

    pub fn vocabs(&self) -> VocabSizes {
        VocabSizes {
            items: self.items,
            categories: self.categories,
            shops: self.shops,
            brands: self.brands,
            entities: self.entities,
        }
    }
}

/// The generated item catalog with ground-truth archetype structure.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub items: Vec<ItemRecord>,
    /// Archetype of every item, parallel to `items`.
    pub item_arch: Vec<u32>,
    /// Item ids per archetype.
    pub arch_items: Vec<Vec<u32>>,
    /// Entity ids per archetype (disjoint).
    pub arch_entities: Vec<Vec<u32>>,
}

/// A user's ground-truth interest mixture over the archetypes; sums to 1.
#[derive(Clone, Debug)]
pub struct LatentUser {
    pub user: u32,
    pub mixture: Vec<f64>,
}

impl LatentUser {
    /// Archetypes with positive weight.
    pub fn support(&self) -> Vec<usize> {
        self.mixture
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One labeled CTR example with ground-truth archetype tags on the sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub user: u32,
    pub seq: Vec<ItemRecord>,
    pub seq_arch: Vec<u32>,
    pub cand: ItemRecord,
    pub ctx: u32,
    pub label: u8,
}

impl LabeledExample {
    pub fn sequence(&self) -> Result<BehaviorSequence> {
        BehaviorSequence::new(self.seq.clone())
    }
}

/// An in-memory dataset, one example per JSONL line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
}

// Exact JSONL schema.
#[derive(Serialize, Deserialize)]
struct JsonSeqItem {
    iid: u32,
    cid: u32,
    sid: u32,
    bid: u32,
    entities: Vec<u32>,
    arch: u32,
}

#[derive(Serialize, Deserialize)]
struct JsonItem {
    iid: u32,
    cid: u32,
    sid: u32,
    bid: u32,
    entities: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct JsonExample {
    user: u32,
    seq: Vec<JsonSeqItem>,
    cand: JsonItem,
    ctx: u32,
    label: u8,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let je = JsonExample {
                user: ex.user,
                seq: ex
                    .seq
                    .iter()
                    .zip(&ex.seq_arch)
                    .map(|(it, &arch)| JsonSeqItem {
                        iid: it.iid,
                        cid: it.cid,
                        sid: it.sid,
                        bid: it.bid,
                        entities: it.entities.clone(),
                        arch,
                    })
                    .collect(),
                cand: JsonItem {
                    iid: ex.cand.iid,
                    cid: ex.cand.cid,
                    sid: ex.cand.sid,
                    bid: ex.cand.bid,
                    entities: ex.cand.entities.clone(),
                },
                ctx: ex.ctx,
                label: ex.label,
            };
            out.push_str(&serde_json::to_string(&je).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl_str(text: &str) -> Result<Dataset> {
        let mut examples = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let je: JsonExample = serde_json::from_str(line)
                .map_err(|e| MfnError::parse(line_no, e.to_string()))?;
            if je.label > 1 {
                return Err(MfnError::parse(line_no, format!("label must be 0 or 1, got {}", je.label)));
            }
            if je.seq.is_empty() {
                return Err(MfnError::parse(line_no, "behavior sequence is empty"));
            }
            let mut seq = Vec::with_capacity(je.seq.len());
            let mut seq_arch = Vec::with_capacity(je.seq.len());
            for s in je.seq {
                seq.push(ItemRecord {
                    iid: s.iid,
                    cid: s.cid,
                    sid: s.sid,
                    bid: s.bid,
                    entities: s.entities,
                });
                seq_arch.push(s.arch);
            }
            examples.push(LabeledExample {
                user: je.user,
                seq,
                seq_arch,
                cand: ItemRecord {
                    iid: je.cand.iid,
                    cid: je.cand.cid,
                    sid: je.cand.sid,
                    bid: je.cand.bid,
                    entities: je.cand.entities,
                },
                ctx: je.ctx,
                label: je.label,
            });
        }
        Ok(Dataset { examples })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| MfnError::io(path.display().to_string(), e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| MfnError::io(path.display().to_string(), e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MfnError::io(path.display().to_string(), e))?;
        Dataset::from_jsonl_str(&text)
    }

    /// Checks every id in the dataset against the vocabularies.
    pub fn validate(&self, vocabs: &VocabSizes, contexts: usize, users: usize) -> Result<()> {
        for ex in &self.examples {
            if ex.user as usize >= users {
                return Err(MfnError::Lookup { field: "user", id: ex.user, vocab: users });
            }
            if ex.ctx as usize >= contexts {
                return Err(MfnError::Lookup { field: "ctx", id: ex.ctx, vocab: contexts });
            }
            for it in ex.seq.iter().chain(std::iter::once(&ex.cand)) {
                crate::features::validate_item(it, vocabs)?;
            }
        }
        Ok(())
    }

    /// One `(user, sequence, archetype tags)` triple per distinct user, in
    /// order of first appearance. This is the center-pretraining corpus.
    pub fn user_sequences(&self) -> Vec<(u32, Vec<ItemRecord>, Vec<u32>)> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for ex in &self.examples {
            if seen.insert(ex.user) {
                out.push((ex.user, ex.seq.clone(), ex.seq_arch.clone()));
            }
        }
        out
    }

    /// Highest id per field, for sanity checks against a config.
    pub fn max_user(&self) -> u32 {
        self.examples.iter().map(|e| e.user).max().unwrap_or(0)
    }
}

/// Builds the item catalog and the latent users.
pub fn generate_world(config: &WorldConfig) -> Result<(Catalog, Vec<LatentUser>)> {
    config.validate()?;
    let g = config.archetypes;
    let mut r = rng::rng(rng::derive(config.seed, STREAM_WORLD));

    // Partition each vocabulary by residue class: id -> id % G.
    let pool = |vocab: usize, arch: usize| -> Vec<u32> {
        (0..vocab).filter(|v| v % g == arch).map(|v| v as u32).collect()
    };
    let cat_pools: Vec<Vec<u32>> = (0..g).map(|a| pool(config.categories, a)).collect();
    let ent_pools: Vec<Vec<u32>> = (0..g).map(|a| pool(config.entities, a)).collect();
    let shop_pools: Vec<Vec<u32>> = (0..g).map(|a| pool(config.shops, a % config.shops.min(g))).collect();
    let brand_pools: Vec<Vec<u32>> = (0..g).map(|a| pool(config.brands, a % config.brands.min(g))).collect();

    let mut items = Vec::with_capacity(config.items);
    let mut item_arch = Vec::with_capacity(config.items);
    let mut arch_items: Vec<Vec<u32>> = vec![Vec::new(); g];
    for i in 0..config.items {
        let arch = i % g;
        let cid = cat_pools[arch][r.gen_range(0..cat_pools[arch].len())];
        let n_ent = r.gen_range(1..=3usize.min(ent_pools[arch].len()));
        let mut entities = Vec::with_capacity(n_ent);
        while entities.len() < n_ent {
            let e = ent_pools[arch][r.gen_range(0..ent_pools[arch].len())];
            if !entities.contains(&e) {
                entities.push(e);
            }
        }
        let sid = if shop_pools[arch].is_empty() {
            r.gen_range(0..config.shops) as u32
        } else {
            shop_pools[arch][r.gen_range(0..shop_pools[arch].len())]
        };
        let bid = if brand_pools[arch].is_empty() {
            r.gen_range(0..config.brands) as u32
        } else {
            brand_pools[arch][r.gen_range(0..brand_pools[arch].len())]
        };
        items.push(ItemRecord { iid: i as u32, cid, sid, bid, entities });
        item_arch.push(arch as u32);
        arch_items[arch].push(i as u32);
    }

    let mut ur = rng::rng(rng::derive(config.seed, STREAM_USERS));
    let mut users = Vec::with_capacity(config.users);
    for u in 0..config.users {
        // 1 to 3 active archetypes; most users mix two or three.
        let roll: f64 = ur.gen_range(0.0..1.0);
        let k_active = if roll < 0.2 { 1 } else if roll < 0.6 { 2 } else { 3 }.min(g);
        let mut order: Vec<usize> = (0..g).collect();
        for i in 0..k_active {
            let j = ur.gen_range(i..g);
            order.swap(i, j);
        }
        let mut mixture = vec![0.0; g];
        let mut total = 0.0;
        for &a in order.iter().take(k_active) {
            let w = ur.gen_range(0.5..1.0);
            mixture[a] = w;
            total += w;
        }
        for w in &mut mixture {
            *w /= total;
        }
        users.push(LatentUser { user: u as u32, mixture });
    }

    Ok((
        Catalog {
            items,
            item_arch,
            arch_items,
            arch_entities: ent_pools,
        },
        users,
    ))
}

fn sample_mixture(mixture: &[f64], r: &mut rand_chacha::ChaCha8Rng) -> usize {
    let u: f64 = r.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &w) in mixture.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    mixture.len() - 1
}

/// Generates train and test datasets with per-user disjoint candidate sets.
pub fn generate_dataset(
    catalog: &Catalog,
    users: &[LatentUser],
    config: &WorldConfig,
) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let g = config.archetypes;
    let mut r = rng::rng(rng::derive(config.seed, STREAM_DATA));
    let mut train = Dataset::default();
    let mut test = Dataset::default();

    for user in users {
        // One behavior sequence per user, shared across their examples.
        let mut seq = Vec::with_capacity(config.seq_len);
        let mut seq_arch = Vec::with_capacity(config.seq_len);
        for _ in 0..config.seq_len {
            let arch = sample_mixture(&user.mixture, &mut r);
            let pool = &catalog.arch_items[arch];
            let iid = pool[r.gen_range(0..pool.len())];
            seq.push(catalog.items[iid as usize].clone());
            seq_arch.push(arch as u32);
        }

        let support = user.support();
        let complement: Vec<usize> = (0..g).filter(|a| !support.contains(a)).collect();
        let mut train_cands: HashSet<u32> = HashSet::new();

        let mut draw_candidate = |r: &mut rand_chacha::ChaCha8Rng, want_positive: bool| -> u32 {
            let arch = if want_positive {
                sample_mixture(&user.mixture, r)
            } else if complement.is_empty() {
                // Degenerate: the user likes everything; fall back to the
                // least-weighted archetype.
                (0..g).min_by(|&a, &b| user.mixture[a].partial_cmp(&user.mixture[b]).unwrap()).unwrap()
            } else {
                complement[r.gen_range(0..complement.len())]
            };
            let pool = &catalog.arch_items[arch];
            pool[r.gen_range(0..pool.len())]
        };

        for split in 0..2 {
            let count = if split == 0 {
                config.train_examples_per_user
            } else {
                config.test_examples_per_user
            };
            for _ in 0..count {
                let want_positive = r.gen_range(0.0..1.0) < config.positive_rate;
                let mut iid = draw_candidate(&mut r, want_positive);
                if split == 1 {
                    // Keep test candidates disjoint from this user's train set.
                    let mut tries = 0;
                    while train_cands.contains(&iid) && tries < 200 {
                        iid = draw_candidate(&mut r, want_positive);
                        tries += 1;
                    }
                    if train_cands.contains(&iid) {
                        let arch = catalog.item_arch[iid as usize] as usize;
                        iid = *catalog.arch_items[arch]
                            .iter()
                            .find(|i| !train_cands.contains(i))
                            .ok_or_else(|| {
                                MfnError::Data(
                                    "cannot build disjoint test candidates; increase the item vocabulary"
                                        .into(),
                                )
                            })?;
                    }
                } else {
                    train_cands.insert(iid);
                }
                let cand = catalog.items[iid as usize].clone();
                let truth = user.mixture[catalog.item_arch[iid as usize] as usize] > 0.0;
                let flip = r.gen_range(0.0..1.0) < config.noise_rate;
                let label = u8::from(truth != flip);
                let ctx = r.gen_range(0..config.contexts) as u32;
                let ex = LabeledExample {
                    user: user.user,
                    seq: seq.clone(),
                    seq_arch: seq_arch.clone(),
                    cand,
                    ctx,
                    label,
                };
                if split == 0 {
                    train.examples.push(ex);
                } else {
                    test.examples.push(ex);
                }
            }
        }
    }
    Ok((train, test))
}

/// Mixture weight of each example's candidate archetype; with zero noise this
/// scorer separates the classes perfectly.
pub fn oracle_scores(dataset: &Dataset, catalog: &Catalog, users: &[LatentUser]) -> Vec<f64> {
    dataset
        .examples
        .iter()
        .map(|ex| {
            let arch = catalog.item_arch[ex.cand.iid as usize] as usize;
            users[ex.user as usize].mixture[arch]
        })
        .collect()
}

/// A corpus of per-user behavior sequences embedded as Gaussian archetype
/// clusters, with stacked behaviors and per-behavior labels. Exercises the
/// center-recovery path without the embedding pipeline.
pub struct GaussianCorpus {
    pub sequences: Vec<Matrix>,
    pub behaviors: Matrix,
    pub labels: Vec<u32>,
}

/// `g` well-separated Gaussian archetypes in `d` dims; every sequence mixes
/// all archetypes with random positive weights.
pub fn gaussian_interest_corpus(
    g: usize,
    users: usize,
    n_per_user: usize,
    d: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> GaussianCorpus {
    let mut r = rng::rng(seed);
    let means: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..d).map(|_| separation * rng::standard_normal(&mut r)).collect())
        .collect();
    let mut sequences = Vec::with_capacity(users);
    let mut all_rows = Vec::with_capacity(users * n_per_user);
    let mut labels = Vec::with_capacity(users * n_per_user);
    for _ in 0..users {
        let mut weights: Vec<f64> = (0..g).map(|_| r.gen_range(0.2..1.0)).collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        let mut rows = Vec::with_capacity(n_per_user);
        for _ in 0..n_per_user {
            let arch = sample_mixture(&weights, &mut r);
            let row: Vec<f64> = means[arch]
                .iter()
                .map(|&m| m + spread * rng::standard_normal(&mut r))
                .collect();
            labels.push(arch as u32);
            all_rows.push(row.clone());
            rows.push(row);
        }
        sequences.push(Matrix::from_rows(&rows));
    }
    GaussianCorpus {
        sequences,
        behaviors: Matrix::from_rows(&all_rows),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            items: 60,
            categories: 12,
            shops: 8,
            brands: 8,
            entities: 40,
            contexts: 4,
            archetypes: 4,
            users: 30,
            seq_len: 10,
            train_examples_per_user: 6,
            test_examples_per_user: 3,
            positive_rate: 0.5,
            noise_rate: 0.0,
            seed: 1234,
        }
    }

    #[test]
    fn world_is_seed_deterministic() {
        let cfg = small_config();
        let (c1, u1) = generate_world(&cfg).unwrap();
        let (c2, u2) = generate_world(&cfg).unwrap();
        assert_eq!(c1.items, c2.items);
        assert_eq!(u1.len(), u2.len());
        for (a, b) in u1.iter().zip(&u2) {
            assert_eq!(a.mixture, b.mixture);
        }
        let (t1, _) = generate_dataset(&c1, &u1, &cfg).unwrap();
        let (t2, _) = generate_dataset(&c2, &u2, &cfg).unwrap();
        assert_eq!(t1.to_jsonl(), t2.to_jsonl());
    }

    #[test]
    fn single_archetype_degenerate_mixture() {
        let mut cfg = small_config();
        cfg.archetypes = 1;
        let (_, users) = generate_world(&cfg).unwrap();
        for u in users {
            assert_eq!(u.mixture, vec![1.0]);
        }
    }

    #[test]
    fn archetype_entity_sets_are_disjoint() {
        let cfg = small_config();
        let (catalog, _) = generate_world(&cfg).unwrap();
        let mut seen = HashSet::new();
        for pool in &catalog.arch_entities {
            assert!(!pool.is_empty());
            for &e in pool {
                assert!(seen.insert(e), "entity {e} in two archetypes");
            }
        }
        // Items only use entities from their own archetype.
        for (item, &arch) in catalog.items.iter().zip(&catalog.item_arch) {
            assert!((1..=3).contains(&item.entities.len()));
            for e in &item.entities {
                assert!(catalog.arch_entities[arch as usize].contains(e));
            }
        }
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        let mut cfg = small_config();
        cfg.categories = 2;
        assert!(matches!(generate_world(&cfg), Err(MfnError::Config(_))));
    }

    #[test]
    fn zero_noise_labels_follow_mixture_membership() {
        let cfg = small_config();
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (train, test) = generate_dataset(&catalog, &users, &cfg).unwrap();
        for ex in train.examples.iter().chain(&test.examples) {
            let arch = catalog.item_arch[ex.cand.iid as usize] as usize;
            let member = users[ex.user as usize].mixture[arch] > 0.0;
            assert_eq!(ex.label == 1, member);
        }
    }

    #[test]
    fn positive_rate_is_respected() {
        let mut cfg = small_config();
        cfg.users = 500;
        cfg.train_examples_per_user = 20;
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (train, _) = generate_dataset(&catalog, &users, &cfg).unwrap();
        assert!(train.len() >= 10_000);
        let rate = train.examples.iter().filter(|e| e.label == 1).count() as f64 / train.len() as f64;
        assert!((rate - 0.5).abs() < 0.02, "empirical positive rate {rate}");
    }

    #[test]
    fn train_and_test_candidates_are_disjoint_per_user() {
        let cfg = small_config();
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (train, test) = generate_dataset(&catalog, &users, &cfg).unwrap();
        for u in &users {
            let train_set: HashSet<u32> = train
                .examples
                .iter()
                .filter(|e| e.user == u.user)
                .map(|e| e.cand.iid)
                .collect();
            for ex in test.examples.iter().filter(|e| e.user == u.user) {
                assert!(!train_set.contains(&ex.cand.iid));
            }
        }
    }

    #[test]
    fn oracle_scores_separate_classes_without_noise() {
        let cfg = small_config();
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (_, test) = generate_dataset(&catalog, &users, &cfg).unwrap();
        let scores = oracle_scores(&test, &catalog, &users);
        let min_pos = scores
            .iter()
            .zip(&test.examples)
            .filter(|(_, e)| e.label == 1)
            .map(|(s, _)| *s)
            .fold(f64::INFINITY, f64::min);
        let max_neg = scores
            .iter()
            .zip(&test.examples)
            .filter(|(_, e)| e.label == 0)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos > max_neg, "oracle must rank all positives above all negatives");
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = small_config();
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (train, _) = generate_dataset(&catalog, &users, &cfg).unwrap();
        let text = train.to_jsonl();
        let back = Dataset::from_jsonl_str(&text).unwrap();
        assert_eq!(train, back);
        back.validate(&cfg.vocabs(), cfg.contexts, cfg.users).unwrap();
    }

    #[test]
    fn jsonl_schema_field_names_are_exact() {
        let cfg = small_config();
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (train, _) = generate_dataset(&catalog, &users, &cfg).unwrap();
        let first = train.to_jsonl().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        for key in ["user", "seq", "cand", "ctx", "label"] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        let item = &v["seq"][0];
        for key in ["iid", "cid", "sid", "bid", "entities", "arch"] {
            assert!(item.get(key).is_some(), "missing seq key {key}");
        }
        assert!(v["cand"].get("arch").is_none(), "candidate carries no tag");
    }

    #[test]
    fn jsonl_rejects_bad_labels_with_line_numbers() {
        let good = r#"{"user":0,"seq":[{"iid":0,"cid":0,"sid":0,"bid":0,"entities":[],"arch":0}],"cand":{"iid":0,"cid":0,"sid":0,"bid":0,"entities":[]},"ctx":0,"label":1}"#;
        let bad = good.replace("\"label\":1", "\"label\":3");
        let text = format!("{good}\n{bad}\n");
        let err = Dataset::from_jsonl_str(&text).unwrap_err();
        match err {
            MfnError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn user_sequences_unique_per_user() {
        let cfg = small_config();
        let (catalog, users) = generate_world(&cfg).unwrap();
        let (train, _) = generate_dataset(&catalog, &users, &cfg).unwrap();
        let seqs = train.user_sequences();
        assert_eq!(seqs.len(), cfg.users);
    }

    #[test]
    fn gaussian_corpus_shapes() {
        let corpus = gaussian_interest_corpus(4, 50, 8, 6, 3.0, 0.4, 5);
        assert_eq!(corpus.sequences.len(), 50);
        assert_eq!(corpus.behaviors.rows(), 400);
        assert_eq!(corpus.labels.len(), 400);
        assert!(corpus.labels.iter().any(|&l| l == 3));
    }
}
