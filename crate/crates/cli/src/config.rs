//! TOML run configuration; any key present overrides the matching flag.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub problem: Option<String>,
    pub dim: Option<Vec<usize>>,
    pub nte: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub seed: Option<u64>,
    pub tests: Option<Vec<String>>,
    pub format: Option<String>,
    pub output: Option<PathBuf>,
    pub max_iters: Option<usize>,
    pub n_mc: Option<usize>,
    pub n_perm: Option<usize>,
    pub gamma: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Replaces `flag` with the config value when one is set.
pub fn apply<T>(flag: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *flag = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let cfg: FileConfig = toml::from_str(
            r#"
problem = "gmd"
dim = [2, 10]
nte = [500]
trials = 20
alpha = 0.05
J = 3
seed = 9
tests = ["L1-opt-ME", "MMD-lin"]
format = "csv"
output = "out.csv"
max_iters = 50
n_mc = 20000
n_perm = 100
gamma = 1e-4
"#,
        )
        .unwrap();
        assert_eq!(cfg.j, Some(3));
        assert_eq!(cfg.dim, Some(vec![2, 10]));
        assert_eq!(cfg.output, Some(PathBuf::from("out.csv")));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("trails = 3").is_err());
    }

    #[test]
    fn apply_overrides_only_when_set() {
        let mut x = 1;
        apply(&mut x, None);
        assert_eq!(x, 1);
        apply(&mut x, Some(4));
        assert_eq!(x, 4);
    }
}
