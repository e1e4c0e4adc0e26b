//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tcan::pipeline::{SyntheticConfig, TrainConfig};
use tcan::tree::{BuildConfig, NegativeSamplingConfig, SamplingStrategy};
use tcan::{Error, LossConfig, ModelConfig, OptimizerKind, Result, SimilarityMode};

/// Every recognised key with its default. Paths default to empty (unset).
fn defaults() -> Vec<(&'static str, String)> {
    let s = SyntheticConfig::default();
    let m = ModelConfig::desk_scale();
    let l = LossConfig::default();
    let t = TrainConfig::default();
    let b = BuildConfig::default();
    let alpha = match SamplingStrategy::default() {
        SamplingStrategy::Geometric { alpha } => alpha,
        _ => 1.4,
    };
    let momentum = match OptimizerKind::default() {
        OptimizerKind::Sgd { momentum } => momentum,
        OptimizerKind::Adam { .. } => 0.9,
    };
    let v = |x: &dyn Display| x.to_string();
    vec![
        ("corpus", String::new()),
        ("weights", String::new()),
        ("index", String::new()),
        ("output", String::new()),
        ("seed", v(&0)),
        ("clusters", v(&s.clusters)),
        ("per_cluster", v(&s.per_cluster)),
        ("dim", v(&s.dim)),
        ("noise", v(&s.noise)),
        ("split", v(&s.split)),
        ("boxes", v(&s.boxes)),
        ("raw_boxes", v(&s.raw_boxes)),
        ("title_len", v(&s.title_len)),
        ("query_len", v(&s.query_len)),
        ("queries_per_video", v(&s.queries_per_video)),
        ("drop", "none".into()),
        ("d_model", v(&m.d_model)),
        ("heads", v(&m.heads)),
        ("layers", v(&m.layers)),
        ("trunk_layers", v(&m.trunk_layers)),
        ("student_width", v(&m.student_width)),
        ("student_heads", v(&m.student_heads)),
        ("student_layers", v(&m.student_layers)),
        ("scaled_logits", v(&m.scaled_logits)),
        ("positional", v(&m.positional)),
        ("similarity", "cosine".into()),
        ("margin", v(&l.margin)),
        ("lambda", v(&l.lambda)),
        ("gamma", v(&l.gamma)),
        ("beta", v(&l.beta)),
        ("sampling", "geometric".into()),
        ("alpha", v(&alpha)),
        ("uniform_count", v(&4)),
        ("tree_negatives", v(&t.tree_negatives)),
        ("optimizer", "sgd".into()),
        ("momentum", v(&momentum)),
        ("learning_rate", v(&t.learning_rate)),
        ("steps", v(&t.steps)),
        ("batch_size", v(&t.batch_size)),
        ("rebuilds", v(&t.rebuilds)),
        ("detach_teacher", v(&t.detach_teacher)),
        ("medoid_iterations", v(&b.max_iterations)),
        ("imbalance_cap", v(&b.imbalance_cap)),
        ("category_seeding", v(&true)),
        ("beam", v(&4)),
        ("exhaustive", v(&false)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Write the resolved configuration next to `output` as `<output>.conf`.
    pub fn save_beside(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.as_os_str().to_owned();
        name.push(".conf");
        let path = PathBuf::from(name);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}` has an invalid value `{raw}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        match self.raw(key) {
            "" => Err(Error::Config(format!("`{key}` is not set"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|p| !p.is_empty()).map(PathBuf::from)
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            clusters: self.get("clusters")?,
            per_cluster: self.get("per_cluster")?,
            dim: self.get("dim")?,
            noise: self.get("noise")?,
            seed: self.get("seed")?,
            split: self.get("split")?,
            boxes: self.get("boxes")?,
            title_len: self.get("title_len")?,
            query_len: self.get("query_len")?,
            queries_per_video: self.get("queries_per_video")?,
            raw_boxes: self.get("raw_boxes")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let similarity = match self.raw("similarity") {
            "cosine" => SimilarityMode::Cosine,
            "inner-product" => SimilarityMode::InnerProduct,
            other => {
                return Err(Error::Config(format!(
                    "`similarity` must be cosine or inner-product, got `{other}`"
                )))
            }
        };
        let m = ModelConfig {
            d_model: self.get("d_model")?,
            heads: self.get("heads")?,
            layers: self.get("layers")?,
            trunk_layers: self.get("trunk_layers")?,
            student_width: self.get("student_width")?,
            student_heads: self.get("student_heads")?,
            student_layers: self.get("student_layers")?,
            scaled_logits: self.get("scaled_logits")?,
            positional: self.get("positional")?,
            similarity,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn build(&self) -> Result<BuildConfig> {
        Ok(BuildConfig {
            seed: self.get("seed")?,
            max_iterations: self.get("medoid_iterations")?,
            imbalance_cap: self.get("imbalance_cap")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let strategy = match self.raw("sampling") {
            "geometric" => SamplingStrategy::Geometric {
                alpha: self.get("alpha")?,
            },
            "arithmetic" => SamplingStrategy::Arithmetic,
            "uniform" => SamplingStrategy::Uniform {
                base: self.get("uniform_count")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "`sampling` must be geometric, arithmetic or uniform, got `{other}`"
                )))
            }
        };
        let optimizer = match self.raw("optimizer") {
            "sgd" => OptimizerKind::Sgd {
                momentum: self.get("momentum")?,
            },
            "adam" => OptimizerKind::adam(),
            other => return Err(Error::Config(format!("`optimizer` must be sgd or adam, got `{other}`"))),
        };
        let cfg = TrainConfig {
            model: self.model()?,
            loss: LossConfig {
                margin: self.get("margin")?,
                lambda: self.get("lambda")?,
                gamma: self.get("gamma")?,
                beta: self.get("beta")?,
            },
            sampling: NegativeSamplingConfig { strategy },
            tree_negatives: self.get("tree_negatives")?,
            optimizer,
            learning_rate: self.get("learning_rate")?,
            steps: self.get("steps")?,
            batch_size: self.get("batch_size")?,
            rebuilds: self.get("rebuilds")?,
            seed: self.get("seed")?,
            detach_teacher: self.get("detach_teacher")?,
            tree: self.build()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train().unwrap(), TrainConfig::default());
        assert_eq!(cfg.synthetic().unwrap(), SyntheticConfig::default());
    }

    #[test]
    fn text_round_trip_and_comments() {
        let mut cfg = RunConfig::parse("# demo\nsteps = 7\n\nsampling=uniform\n").unwrap();
        cfg.set_pair("beam=2").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.get::<usize>("steps").unwrap(), 7);
        assert_eq!(
            cfg.train().unwrap().sampling.strategy,
            SamplingStrategy::Uniform { base: 4 }
        );
    }

    #[test]
    fn bad_entries_are_config_errors() {
        for text in ["nonsense = 1", "steps", "steps = many"] {
            let err = RunConfig::parse(text).and_then(|c| c.train().map(|_| ()));
            assert_eq!(err.unwrap_err().kind(), "config", "{text}");
        }
        assert_eq!(RunConfig::default().path("corpus").unwrap_err().kind(), "config");
    }
}
