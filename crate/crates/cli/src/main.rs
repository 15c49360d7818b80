use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use md5::{Digest, Md5};

use hebbseed_core::checkpoint::Checkpoint;
use hebbseed_core::experiment::aggregate::{aggregate, check_consistent, render_table};
use hebbseed_core::experiment::output::{self, load_run, write_table, Manifest};
use hebbseed_core::experiment::runner::{self, SweepOutput};
use hebbseed_core::experiment::{DatasetKind, ExperimentConfig, Method};
use hebbseed_core::layers::ProbePoint;
use hebbseed_core::verify;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "hebbseed", version, about = "Hebbian PCA pre-training and semi-supervised linear probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Paper,
    /// 5k/1k/1k images, four regimes, three seeds, half width.
    Desk,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML file; keys it omits keep the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    /// Extra `key=value` assignments applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    assignments: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match self.preset {
            Preset::Paper => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
        };
        let cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_toml_over(&base, &text).with_context(|| format!("in {}", path.display()))?
            }
            None => base,
        };
        Ok(cfg.with_assignments(&self.assignments)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FetchTarget {
    Cifar10,
    Cifar100,
}

#[derive(Subcommand)]
enum Command {
    /// Download and unpack a CIFAR binary archive.
    Fetch {
        #[arg(value_enum)]
        dataset: FetchTarget,
        #[arg(long, default_value = "data")]
        dir: PathBuf,
        /// Archive URL; defaults to the dataset's official location.
        #[arg(long)]
        url: Option<String>,
        /// Expected MD5 of the archive; defaults to the published value.
        #[arg(long)]
        md5: Option<String>,
        /// Unpack a local archive instead of downloading.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Print a complete configuration file.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Hebbian pre-training of one seed; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a single cell.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "Final")]
        probe: String,
        /// Percentage of labeled training samples.
        #[arg(long)]
        regime: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pre-trained checkpoint, required by hpca and hpca-ft.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory for records.csv and cells.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every seed, regime, method and probe of a configuration.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare the learning rules and kernels with the brute-force oracles.
    VerifyOracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate finished runs into table.csv and table.txt.
    Report {
        /// A run directory, or a directory of run directories.
        #[arg(long)]
        runs: PathBuf,
        /// Where to write the tables; defaults to `--runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Fetch { dataset, dir, url, md5, archive } => fetch(dataset, &dir, url, md5, archive.as_deref()),
        Command::Config { config } => {
            print!("{}", config.load()?.to_toml());
            Ok(())
        }
        Command::Pretrain { config, seed, out } => pretrain(&config.load()?, seed, &out),
        Command::Train { config, method, probe, regime, seed, ckpt, out } => {
            let method = Method::parse(&method)?;
            let probe: ProbePoint = probe.parse()?;
            let cfg = ExperimentConfig {
                regimes: vec![regime],
                methods: vec![method],
                probes: vec![probe],
                seeds: vec![seed],
                ..config.load()?
            };
            train(&cfg, seed, ckpt.as_deref(), out.as_deref())
        }
        Command::Sweep { config } => sweep(&config.load()?),
        Command::VerifyOracle { seed } => verify_oracle(seed),
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
const CIFAR10_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";
const CIFAR100_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz";
const CIFAR100_MD5: &str = "03b5dce01913d631647c71ecec9e9cb8";

fn fetch(
    target: FetchTarget,
    dir: &Path,
    url: Option<String>,
    md5: Option<String>,
    archive: Option<&Path>,
) -> Result<()> {
    let (default_url, default_md5, kind) = match target {
        FetchTarget::Cifar10 => (CIFAR10_URL, CIFAR10_MD5, DatasetKind::Cifar10),
        FetchTarget::Cifar100 => (CIFAR100_URL, CIFAR100_MD5, DatasetKind::Cifar100),
    };
    let bytes = match archive {
        Some(path) => fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let url = url.as_deref().unwrap_or(default_url);
            info!("downloading {url}");
            let mut body = Vec::new();
            reqwest::blocking::get(url)
                .and_then(|r| r.error_for_status())
                .with_context(|| format!("downloading {url}"))?
                .read_to_end(&mut body)?;
            body
        }
    };
    let digest = hex::encode(Md5::digest(&bytes));
    let expected = md5.as_deref().unwrap_or(default_md5).to_ascii_lowercase();
    if digest != expected {
        bail!("archive MD5 {digest} does not match the expected {expected}");
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    tar::Archive::new(flate2::read::GzDecoder::new(bytes.as_slice()))
        .unpack(dir)
        .with_context(|| format!("unpacking into {}", dir.display()))?;
    let (train, test) = match kind {
        DatasetKind::Cifar100 => hebbseed_core::data::load_cifar100(dir)?,
        _ => hebbseed_core::data::load_cifar10(dir)?,
    };
    println!("{}: {} training and {} test images in {}", train.name, train.len(), test.len(), dir.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let data = runner::load_data(cfg)?;
    let (net, pre) = runner::run_hpca_pretrain(cfg, &data.pool, seed)?;
    runner::pretrained_checkpoint(&net, &pre).save(out)?;
    println!("epoch  representation error per block");
    for (e, row) in pre.report.representation_error.iter().enumerate() {
        let cols: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{e:>5}  {}", cols.join("  "));
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, seed: u64, ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let pretrained = match ckpt {
        Some(path) => Some(Checkpoint::load(path)?.network),
        None if cfg.methods.iter().any(|m| m.needs_checkpoint()) => {
            bail!("{} needs a pre-trained checkpoint (--ckpt)", cfg.methods[0])
        }
        None => None,
    };
    let data = runner::load_data(cfg)?;
    let mut result = SweepOutput { nested: true, ..SweepOutput::default() };
    runner::run_cells(cfg, &data, &runner::run_id(cfg), seed, pretrained.as_ref(), &mut result)?;
    for c in &result.cells {
        println!(
            "{} {} at {}%: top-{} test accuracy {:.2}% (best epoch {})",
            c.method,
            c.probe,
            c.regime,
            c.top_k,
            100.0 * c.test_acc,
            c.best_epoch.map_or("-".into(), |e| e.to_string())
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        output::write_csv(&dir.join(output::RECORDS), &result.records)?;
        output::write_csv(&dir.join(output::CELLS), &result.cells)?;
        println!("records written to {}", dir.display());
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    info!("configuration overrides: {:?}", cfg.overrides());
    let data = runner::load_data(cfg)?;
    let (dir, _) = output::run_to_dir(cfg, &data)?;
    print!("{}", fs::read_to_string(dir.join(output::TABLE_TXT))?);
    println!("results in {}", dir.display());
    Ok(())
}

fn verify_oracle(seed: u64) -> Result<()> {
    let checks = verify::run_all(seed)?;
    for c in &checks {
        println!(
            "{} {:<40} {:.3e}{} (limit {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            if c.unit.is_empty() { String::new() } else { format!(" {}", c.unit) },
            c.threshold
        );
    }
    if checks.iter().any(|c| !c.passed()) {
        bail!("oracle verification failed");
    }
    Ok(())
}

fn report(runs: &Path, out: Option<&Path>) -> Result<()> {
    let dirs: Vec<PathBuf> = if runs.join(output::MANIFEST).is_file() {
        vec![runs.to_path_buf()]
    } else {
        let mut d: Vec<PathBuf> = fs::read_dir(runs)
            .with_context(|| format!("listing {}", runs.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(output::MANIFEST).is_file())
            .collect();
        d.sort();
        d
    };
    if dirs.is_empty() {
        bail!("no runs with a {} under {}", output::MANIFEST, runs.display());
    }
    let loaded = dirs.iter().map(|d| load_run(d)).collect::<hebbseed_core::Result<Vec<_>>>()?;
    check_consistent(&loaded)?;
    for r in &loaded {
        let m: &Manifest = &r.manifest;
        if !m.nested_splits {
            log::warn!("{}: labeled sets were not nested across regimes", r.dir.display());
        }
    }
    let cells: Vec<_> = loaded.iter().flat_map(|r| r.cells.iter().cloned()).collect();
    let rows = aggregate(&cells)?;
    let dest = out.unwrap_or(runs);
    fs::create_dir_all(dest)?;
    write_table(dest, &rows)?;
    print!("{}", render_table(&rows));
    println!("tables written to {}", dest.display());
    Ok(())
}
