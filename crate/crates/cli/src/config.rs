//! Run settings: command-line flags layered over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use codeq::baselines::Schedule;
use codeq::stream::{Method, MethodConfig, StreamParams};

use crate::CliError;

/// Every setting any command reads. Unset values fall back to the TOML file
/// given with `--config`, then to the command's default.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Comma-separated methods: codeq, frozenpq, rebuildpq, onlinepq, dedriftpq, quadsketch.
    #[arg(long)]
    pub method: Option<String>,
    /// Product blocks M.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Codebook bits L (tree depth for CoDEQ). For bench-io, a comma-separated list.
    #[arg(long)]
    pub bits: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub kprime: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub fq: Option<f64>,
    #[arg(long)]
    pub fd: Option<f64>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Initial set size; defaults to a tenth of the vectors.
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Vector file (.fvecs, .bvecs or .ivecs).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Scenario file written by gen-stream.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report recall as a fraction of RebuildPQ's.
    #[arg(long)]
    pub normalize_rebuild: bool,
    /// gen-data: number of vectors.
    #[arg(long)]
    pub n: Option<usize>,
    /// gen-data: dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// gen-data: spacing of consecutive mixture components.
    #[arg(long)]
    pub drift: Option<f64>,
    /// bench-io: comma-separated dataset sizes.
    #[arg(long)]
    pub sizes: Option<String>,
    /// bench-io: inserts measured per size.
    #[arg(long)]
    pub trials: Option<usize>,
    /// DeDriftPQ: clusters split per recluster (default: smallest m reaching 2% of clusters).
    #[arg(long)]
    pub dedrift_m: Option<usize>,
    /// DeDriftPQ trigger check: "insert" or "batch".
    #[arg(long)]
    pub dedrift_schedule: Option<String>,
    /// RebuildPQ retrains after this many batches.
    #[arg(long)]
    pub rebuild_period: Option<usize>,
}

macro_rules! overlay {
    ($top:ident, $base:ident; $($f:ident),*) => {
        Settings {
            $($f: $top.$f.or($base.$f),)*
            normalize_rebuild: $top.normalize_rebuild || $base.normalize_rebuild,
        }
    };
}

impl Settings {
    /// `self` (the flags) wins over `file` wherever both are set.
    pub fn over(self, file: Settings) -> Settings {
        overlay!(self, file; method, blocks, bits, k, kprime, alpha, fq, fd, tau, clusters, n0, seed, input,
            scenario, out, n, dim, drift, sizes, trials, dedrift_m, dedrift_schedule, rebuild_period)
    }

    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.input.as_deref().ok_or_else(|| CliError::Config("--input is required".into()))
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        let list = self.method.as_deref().unwrap_or("codeq");
        list.split(',').map(|m| m.trim().parse::<Method>().map_err(CliError::from)).collect()
    }

    pub fn bits_list(&self, default: &[usize]) -> Result<Vec<usize>, CliError> {
        match &self.bits {
            None => Ok(default.to_vec()),
            Some(s) => parse_list(s, "--bits"),
        }
    }

    pub fn single_bits(&self, default: usize) -> Result<usize, CliError> {
        match self.bits_list(&[default])?.as_slice() {
            [b] => Ok(*b),
            _ => Err(CliError::Config("this command takes a single --bits value".into())),
        }
    }

    pub fn stream_params(&self, rows: usize) -> StreamParams {
        let d = StreamParams::defaults(rows, self.seed());
        StreamParams {
            clusters: self.clusters.unwrap_or(d.clusters),
            n0: self.n0.unwrap_or(d.n0),
            fq: self.fq.unwrap_or(d.fq),
            tau: self.tau.unwrap_or(d.tau),
            alpha: self.alpha.unwrap_or(d.alpha),
            fd: self.fd.unwrap_or(d.fd),
            seed: self.seed(),
        }
    }

    pub fn method_config(&self) -> Result<MethodConfig, CliError> {
        let mut cfg = MethodConfig::new(self.blocks.unwrap_or(8), self.single_bits(12)?, self.seed());
        if let Some(m) = self.dedrift_m {
            cfg.dedrift.largest = m;
            cfg.dedrift.smallest = m;
        }
        cfg.dedrift.schedule = match self.dedrift_schedule.as_deref() {
            None | Some("insert") => Schedule::EveryInsert,
            Some("batch") => Schedule::PerBatch,
            Some(other) => return Err(CliError::Config(format!("unknown DeDrift schedule {other:?}"))),
        };
        if let Some(p) = self.rebuild_period {
            cfg.rebuild_period = p;
        }
        Ok(cfg)
    }
}

pub fn parse_list(s: &str, flag: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| CliError::Config(format!("{flag}: {v:?} is not a count"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: Settings = toml::from_str("alpha = 0.5\nblocks = 4\nmethod = \"frozenpq\"\nnormalize_rebuild = true").unwrap();
        let flags = Settings { alpha: Some(0.1), ..Settings::default() };
        let s = flags.over(file);
        assert_eq!(s.alpha, Some(0.1));
        assert_eq!(s.blocks, Some(4));
        assert!(s.normalize_rebuild);
        assert_eq!(s.methods().unwrap(), vec![Method::FrozenPq]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("alhpa = 1.0").is_err());
    }

    #[test]
    fn stream_defaults() {
        let p = Settings::default().stream_params(1000);
        assert_eq!((p.clusters, p.n0, p.tau, p.fq, p.fd, p.alpha), (10, 100, 10, 0.1, 1.0, 1.0));
    }

    #[test]
    fn lists_parse() {
        let s = Settings { bits: Some("4, 6".into()), ..Settings::default() };
        assert_eq!(s.bits_list(&[1]).unwrap(), vec![4, 6]);
        assert!(s.single_bits(1).is_err());
        assert!(parse_list("3,x", "--sizes").is_err());
    }
}
