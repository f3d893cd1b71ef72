//! Command-line front end for `graphalign`.
//!
//! Four subcommands share one flat configuration:
//! `generate` writes a synthetic scene to disk, `align` runs and scores the
//! alignment pipelines, `sweep` evaluates a hyperparameter grid into CSV and
//! `oracle-check` compares every fast path against its slow reference.

pub mod commands;
pub mod config;
pub mod oracle_check;

use std::ffi::OsString;
use std::io::Write;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] graphalign::Error),

    #[error("{0} oracle comparison(s) failed")]
    OracleMismatch(usize),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ORACLE: i32 = 12;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use graphalign::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::OracleMismatch(_) => EXIT_ORACLE,
            CliError::Core(e) => match e {
                E::Io { .. } => 3,
                E::Format { .. } => 4,
                E::Calibration(_) => 5,
                E::Graph(_) => 6,
                E::Fusion(_) => 7,
                E::Attention(_) => 8,
                E::Training(_) => 9,
                E::Evaluation(_) => 10,
                E::InvalidInput(_) => 11,
            },
        }
    }
}

const EXIT_CODES: &str = "\
Exit status:
  0   success
  2   usage error (bad flag, config key or value)
  3   I/O error
  4   malformed file
  5   invalid calibration
  6   graph construction error
  7   fusion error
  8   attention error
  9   training error
  10  evaluation error
  11  invalid input
  12  oracle mismatch";

const ENV_HELP: &str = "Environment:\n  GRAPHALIGN_SEED  overrides seed, perturb_seed and attention_seed";

pub fn command() -> Command {
    let mut cmd = Command::new("graphalign")
        .about("Aligns LiDAR points with camera features through chunked KNN graphs and slot attention")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .after_help(format!("{EXIT_CODES}\n\n{ENV_HELP}"))
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .overrides_with("config")
                .help("Flat `key = value` config file; flags override it"),
        );
    for key in config::KEYS {
        cmd = cmd.arg(
            Arg::new(key.name)
                .long(key.flag)
                .global(true)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .overrides_with(key.name)
                .help(key.help),
        );
    }
    cmd.subcommand(Command::new("generate").about("Write a synthetic scene (points, features, calibration, ground truth) into --out"))
        .subcommand(Command::new("align").about("Run the configured methods and write an alignment report"))
        .subcommand(Command::new("sweep").about("Evaluate every (method, k, chunk, heads) cell and write CSV"))
        .subcommand(Command::new("oracle-check").about("Compare fast paths with brute-force references and print PASS/FAIL"))
}

/// Builds the effective configuration: defaults, then the config file, then
/// flags, then `seed_override` for every seed.
pub fn resolve(matches: &ArgMatches, seed_override: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        cfg.apply_file(std::path::Path::new(path))?;
    }
    for key in config::KEYS {
        if let Some(v) = matches.get_one::<String>(key.name) {
            cfg.set(key.name, v)?;
        }
    }
    if let Some(s) = seed_override {
        let seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{} = `{s}` is not an unsigned integer", config::SEED_ENV)))?;
        cfg.override_seeds(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing results that have no file destination to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command()
        .try_get_matches_from(args)
        .map_err(|e| CliError::Usage(e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string()))?;
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let cfg = resolve(&matches, env_seed.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let mut buf: Vec<u8> = Vec::new();
    let result = pool.install(|| match matches.subcommand_name() {
        Some("generate") => commands::generate(&cfg),
        Some("align") => commands::align(&cfg, &mut buf),
        Some("sweep") => commands::sweep(&cfg, &mut buf),
        Some("oracle-check") => oracle_check::run(&cfg, &mut buf),
        _ => Err(CliError::Usage("missing subcommand".into())),
    });
    out.write_all(&buf)
        .and_then(|_| out.flush())
        .map_err(|e| graphalign::Error::io("<stdout>", e))?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches(args: &[&str]) -> ArgMatches {
        command().try_get_matches_from(args).unwrap()
    }

    #[test]
    fn every_key_has_a_flag() {
        let cmd = command();
        for key in config::KEYS {
            assert!(cmd.get_arguments().any(|a| a.get_long() == Some(key.flag)), "{}", key.name);
        }
    }

    #[test]
    fn flags_override_file_and_env_overrides_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "k = 9\nseed = 3\nheads = 2\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve(&matches(&["graphalign", "align", "--config", p, "--k", "25"]), None).unwrap();
        assert_eq!((cfg.ks.clone(), cfg.scene.seed, cfg.heads.clone()), (vec![25], 3, vec![2]));
        let cfg = resolve(&matches(&["graphalign", "--config", p, "align"]), Some("8")).unwrap();
        assert_eq!((cfg.scene.seed, cfg.perturbation.seed, cfg.attention_seed), (8, 8, 8));
        assert!(resolve(&matches(&["graphalign", "align"]), Some("x")).is_err());
    }

    #[test]
    fn exit_codes_are_distinct() {
        use graphalign::Error as E;
        let errors = [
            CliError::Usage(String::new()),
            CliError::OracleMismatch(1),
            E::io("p", std::io::Error::other("x")).into(),
            E::format("GAPC", "x").into(),
            E::Calibration(String::new()).into(),
            E::Graph(String::new()).into(),
            E::Fusion(String::new()).into(),
            E::Attention(String::new()).into(),
            E::Training(String::new()).into(),
            E::Evaluation(String::new()).into(),
            E::InvalidInput(String::new()).into(),
        ];
        let mut codes: Vec<i32> = errors.iter().map(CliError::exit_code).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), errors.len());
        assert!(codes.iter().all(|&c| c != 0 && c != 1));
    }
}
