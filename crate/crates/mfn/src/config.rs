//! Run configuration: one flat key=value text format shared by the config
//! file, CLI overrides, checkpoint echoes and artifact sidecars.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::AdamConfig;
use crate::error::{MfnError, Result};
use crate::features::ChannelFieldSpec;
use crate::model::MfnConfig;
use crate::synthgen::WorldConfig;

/// Every knob of the pipeline. Echoed into output artifacts for provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // World generation.
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub shops: usize,
    pub brands: usize,
    pub entities: usize,
    pub contexts: usize,
    pub archetypes: usize,
    pub seq_len: usize,
    pub train_examples_per_user: usize,
    pub test_examples_per_user: usize,
    pub positive_rate: f64,
    pub noise_rate: f64,

    // Model architecture.
    pub dim: usize,
    pub d_h: usize,
    pub k: usize,
    pub heads: usize,
    pub channels: Vec<ChannelFieldSpec>,
    pub lambda_e: f64,
    pub freeze_centers: bool,

    // Main-task optimization.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,

    // Fixed-embedding pretraining.
    pub embed_steps: usize,
    pub embed_batch: usize,
    pub embed_lr: f64,

    // Center pretraining.
    pub center_iters: usize,
    pub center_batch: usize,
    pub center_lr: f64,
    pub center_sgd: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            users: 2000,
            items: 600,
            categories: 24,
            shops: 30,
            brands: 30,
            entities: 48,
            contexts: 4,
            archetypes: 6,
            seq_len: 20,
            train_examples_per_user: 25,
            test_examples_per_user: 6,
            positive_rate: 0.5,
            noise_rate: 0.1,
            dim: 16,
            d_h: 32,
            k: 4,
            heads: 2,
            channels: vec![
                ChannelFieldSpec::parse("cid").expect("valid"),
                ChannelFieldSpec::parse("entities").expect("valid"),
            ],
            lambda_e: 0.0,
            freeze_centers: true,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            epochs: 1,
            embed_steps: 1500,
            embed_batch: 256,
            embed_lr: 1e-3,
            center_iters: 400,
            center_batch: 64,
            center_lr: 0.01,
            center_sgd: false,
        }
    }
}

fn parse_channels(text: &str) -> Result<Vec<ChannelFieldSpec>> {
    text.split('|').map(ChannelFieldSpec::parse).collect()
}

fn channels_to_string(channels: &[ChannelFieldSpec]) -> String {
    channels
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

impl RunConfig {
    /// Applies one `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| MfnError::Config(format!("invalid value `{value}` for key `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num("seed", v)?,
            "users" => self.users = num("users", v)?,
            "items" => self.items = num("items", v)?,
            "categories" => self.categories = num("categories", v)?,
            "shops" => self.shops = num("shops", v)?,
            "brands" => self.brands = num("brands", v)?,
            "entities" => self.entities = num("entities", v)?,
            "contexts" => self.contexts = num("contexts", v)?,
            "archetypes" => self.archetypes = num("archetypes", v)?,
            "seq_len" => self.seq_len = num("seq_len", v)?,
            "train_examples_per_user" => self.train_examples_per_user = num(key, v)?,
            "test_examples_per_user" => self.test_examples_per_user = num(key, v)?,
            "positive_rate" => self.positive_rate = num(key, v)?,
            "noise_rate" => self.noise_rate = num(key, v)?,
            "dim" => self.dim = num("dim", v)?,
            "d_h" => self.d_h = num("d_h", v)?,
            "k" => self.k = num("k", v)?,
            "heads" => self.heads = num("heads", v)?,
            "channels" => self.channels = parse_channels(v)?,
            "lambda_e" => self.lambda_e = num(key, v)?,
            "freeze_centers" => self.freeze_centers = num(key, v)?,
            "lr" => self.lr = num("lr", v)?,
            "beta1" => self.beta1 = num("beta1", v)?,
            "beta2" => self.beta2 = num("beta2", v)?,
            "adam_eps" => self.adam_eps = num("adam_eps", v)?,
            "batch_size" => self.batch_size = num("batch_size", v)?,
            "epochs" => self.epochs = num("epochs", v)?,
            "embed_steps" => self.embed_steps = num(key, v)?,
            "embed_batch" => self.embed_batch = num(key, v)?,
            "embed_lr" => self.embed_lr = num(key, v)?,
            "center_iters" => self.center_iters = num(key, v)?,
            "center_batch" => self.center_batch = num(key, v)?,
            "center_lr" => self.center_lr = num(key, v)?,
            "center_sgd" => self.center_sgd = num(key, v)?,
            other => return Err(MfnError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Full key=value echo, in a stable order; `from_pairs(echo())` is the
    /// identity.
    pub fn echo(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("seed", self.seed.to_string()),
            p("users", self.users.to_string()),
            p("items", self.items.to_string()),
            p("categories", self.categories.to_string()),
            p("shops", self.shops.to_string()),
            p("brands", self.brands.to_string()),
            p("entities", self.entities.to_string()),
            p("contexts", self.contexts.to_string()),
            p("archetypes", self.archetypes.to_string()),
            p("seq_len", self.seq_len.to_string()),
            p("train_examples_per_user", self.train_examples_per_user.to_string()),
            p("test_examples_per_user", self.test_examples_per_user.to_string()),
            p("positive_rate", self.positive_rate.to_string()),
            p("noise_rate", self.noise_rate.to_string()),
            p("dim", self.dim.to_string()),
            p("d_h", self.d_h.to_string()),
            p("k", self.k.to_string()),
            p("heads", self.heads.to_string()),
            p("channels", channels_to_string(&self.channels)),
            p("lambda_e", self.lambda_e.to_string()),
            p("freeze_centers", self.freeze_centers.to_string()),
            p("lr", self.lr.to_string()),
            p("beta1", self.beta1.to_string()),
            p("beta2", self.beta2.to_string()),
            p("adam_eps", self.adam_eps.to_string()),
            p("batch_size", self.batch_size.to_string()),
            p("epochs", self.epochs.to_string()),
            p("embed_steps", self.embed_steps.to_string()),
            p("embed_batch", self.embed_batch.to_string()),
            p("embed_lr", self.embed_lr.to_string()),
            p("center_iters", self.center_iters.to_string()),
            p("center_batch", self.center_batch.to_string()),
            p("center_lr", self.center_lr.to_string()),
            p("center_sgd", self.center_sgd.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            // Checkpoints may carry extra non-config keys (e.g. variant).
            if k == "variant" {
                continue;
            }
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses the flat config file: `key=value` lines, `#` comments, blank
    /// lines allowed.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MfnError::parse(line_no, format!("expected key=value, got `{line}`")))?;
            cfg.apply(k, v)
                .map_err(|e| MfnError::parse(line_no, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MfnError::io(path.display().to_string(), e))?;
        RunConfig::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.echo() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Writes the `<artifact>.config` provenance sidecar next to an artifact.
    pub fn write_sidecar(&self, artifact: impl AsRef<Path>) -> Result<()> {
        let artifact = artifact.as_ref();
        let mut path = artifact.as_os_str().to_owned();
        path.push(".config");
        let path = std::path::PathBuf::from(path);
        std::fs::write(&path, self.to_text())
            .map_err(|e| MfnError::io(path.display().to_string(), e))
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            items: self.items,
            categories: self.categories,
            shops: self.shops,
            brands: self.brands,
            entities: self.entities,
            contexts: self.contexts,
            archetypes: self.archetypes,
            users: self.users,
            seq_len: self.seq_len,
            train_examples_per_user: self.train_examples_per_user,
            test_examples_per_user: self.test_examples_per_user,
            positive_rate: self.positive_rate,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }

    /// Architecture config for a model variant.
    pub fn mfn(&self, use_combination: bool) -> MfnConfig {
        MfnConfig {
            dim: self.dim,
            d_h: self.d_h,
            k: self.k,
            heads: self.heads,
            channels: self.channels.clone(),
            users: self.users,
            contexts: self.contexts,
            head_hidden: vec![64, 32],
            lambda_e: self.lambda_e,
            freeze_centers: self.freeze_centers,
            use_combination,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.noise_rate = 0.15;
        cfg.channels = parse_channels("cid,entities|iid").unwrap();
        cfg.freeze_centers = false;
        let back = RunConfig::from_pairs(&cfg.echo()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parse_str_with_comments_and_overrides() {
        let text = "# comment\n\nseed=9\nnoise_rate = 0.2\nchannels=cid|entities\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.noise_rate, 0.2);
        assert_eq!(cfg.channels.len(), 2);
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let err = RunConfig::parse_str("seed=1\nwat=2\n").unwrap_err();
        match err {
            MfnError::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("wat"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("dim", "banana").unwrap_err().to_string();
        assert!(err.contains("dim") && err.contains("banana"));
    }

    #[test]
    fn junk_never_panics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let len = rng.gen_range(0..120);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen_range(0x20..0x7f) as u8).collect();
            let _ = RunConfig::parse_str(&String::from_utf8(bytes).unwrap());
        }
    }
}
