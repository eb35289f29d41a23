//! Run configuration for `deconv inr`: `[train]` and `[model]` sections of an
//! INI file, overlaid by command-line flags.

use crate::error::{Error, Result};
use crate::inr::{HashGridConfig, MlpConfig, FULL_TABLE_SIZE};
use crate::io::ini::{Ini, SectionReader};
use crate::optim::TrainConfig;

use super::InrArgs;

pub const GRID_LEVELS: usize = 8;
pub const GRID_TABLE_LOG2: u32 = 14;
pub const GRID_HIDDEN: usize = 32;
pub const GRID_SCORE_WINDOW: usize = 50;
pub const GRID_CONSISTENCY: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub grid: HashGridConfig,
    /// `None` means the fine sampling grid size.
    pub max_resolution: Option<usize>,
    pub mlp: MlpConfig,
    /// Whether a seed was pinned by the config or a flag.
    pub seed_pinned: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            grid: HashGridConfig::desk(16),
            max_resolution: None,
            mlp: MlpConfig::default(),
            seed_pinned: false,
        }
    }
}

pub(super) fn table_size(log2: u32) -> Result<usize> {
    if !(4..=26).contains(&log2) {
        return Err(Error::invalid(format!("table size 2^{log2} outside 2^4..2^26")));
    }
    Ok(1 << log2)
}

impl RunConfig {
    pub fn from_ini(text: &str) -> Result<RunConfig> {
        let ini = Ini::parse(text)?;
        ini.reject_unknown_sections(&["train", "model"])?;
        let mut c = RunConfig::default();
        if let Some(sec) = ini.unique("train")? {
            let mut r = SectionReader::new(sec);
            let t = &mut c.train;
            t.iterations = r.get_or("iterations", t.iterations)?;
            t.adam.learning_rate = r.get_or("learning_rate", t.adam.learning_rate)?;
            t.adam.beta1 = r.get_or("beta1", t.adam.beta1)?;
            t.adam.beta2 = r.get_or("beta2", t.adam.beta2)?;
            t.adam.eps = r.get_or("adam_eps", t.adam.eps)?;
            t.weights.lambda = r.get_or("lambda", t.weights.lambda)?;
            t.weights.epsilon_tv = r.get_or("epsilon_tv", t.weights.epsilon_tv)?;
            t.weights.l2_sum = r.get_bool("l2_sum", t.weights.l2_sum)?;
            t.compression.dynamic_range = r.get_or("dynamic_range", t.compression.dynamic_range)?;
            t.oversample = r.get_or("oversample", t.oversample)?;
            t.jitter = r.get_bool("jitter", t.jitter)?;
            t.log_every = r.get_or("log_every", t.log_every)?;
            if let Some(seed) = r.get("seed")? {
                t.seed = seed;
                c.seed_pinned = true;
            }
            r.finish()?;
        }
        if let Some(sec) = ini.unique("model")? {
            let mut r = SectionReader::new(sec);
            let g = &mut c.grid;
            g.levels = r.get_or("levels", g.levels)?;
            g.features = r.get_or("features", g.features)?;
            if let Some(log2) = r.get::<u32>("table_log2")? {
                g.table_size = table_size(log2)?;
            }
            g.base_resolution = r.get_or("base_resolution", g.base_resolution)?;
            c.max_resolution = r.get("max_resolution")?;
            c.mlp.hidden_width = r.get_or("hidden_width", c.mlp.hidden_width)?;
            c.mlp.hidden_layers = r.get_or("hidden_layers", c.mlp.hidden_layers)?;
            r.finish()?;
        }
        Ok(c)
    }

    /// Overlays the flags that were given.
    pub fn apply_flags(&mut self, a: &InrArgs) -> Result<()> {
        let t = &mut self.train;
        if let Some(v) = a.iterations {
            t.iterations = v;
        }
        if let Some(v) = a.lr {
            t.adam.learning_rate = v;
        }
        if let Some(v) = a.lambda {
            t.weights.lambda = v;
        }
        if let Some(v) = a.tv_weight {
            t.weights.epsilon_tv = v;
        }
        if a.l2_sum {
            t.weights.l2_sum = true;
        }
        if let Some(v) = a.oversample {
            t.oversample = v;
        }
        if a.no_jitter {
            t.jitter = false;
        }
        if let Some(v) = a.dr {
            t.compression.dynamic_range = v;
        }
        if let Some(v) = a.log_every {
            t.log_every = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
            self.seed_pinned = true;
        }
        let g = &mut self.grid;
        if let Some(v) = a.levels {
            g.levels = v;
        }
        if let Some(log2) = a.table_log2 {
            g.table_size = table_size(log2)?;
        }
        if a.full_table {
            g.table_size = FULL_TABLE_SIZE;
        }
        if let Some(v) = a.base_res {
            g.base_resolution = v;
        }
        if a.max_res.is_some() {
            self.max_resolution = a.max_res;
        }
        if let Some(v) = a.hidden {
            self.mlp.hidden_width = v;
        }
        if let Some(v) = a.layers {
            self.mlp.hidden_layers = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_desk_setup() {
        let c = RunConfig::from_ini("").unwrap();
        assert_eq!(c.train.iterations, 5000);
        assert_eq!(c.grid.levels, 15);
        assert_eq!(c.grid.table_size, 1 << 18);
        assert_eq!(c.mlp.hidden_width, 64);
        assert!(!c.seed_pinned);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_ini(
            "[train]\niterations = 10\nl2_sum = true\nseed = 7\n[model]\ntable_log2 = 12\nmax_resolution = 64\n",
        )
        .unwrap();
        assert_eq!(c.train.iterations, 10);
        assert!(c.train.weights.l2_sum);
        assert_eq!(c.train.seed, 7);
        assert!(c.seed_pinned);
        assert_eq!(c.grid.table_size, 4096);
        assert_eq!(c.max_resolution, Some(64));
    }

    #[test]
    fn unknown_keys_and_sections_fail_closed() {
        let err = RunConfig::from_ini("[train]\niteratoins = 10\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(RunConfig::from_ini("[optim]\n").is_err());
        assert!(RunConfig::from_ini("[model]\ntable_log2 = 40\n").is_err());
    }
}
