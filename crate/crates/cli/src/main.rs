use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssmil::analysis::{analyze_anchor, analyze_locality, anchor_csv, decay_csv, locality_csv, model_decay, positive_anchor};
use ssmil::config::ModelConfig;
use ssmil::model::{evaluate, load_checkpoint, save_checkpoint, train};
use ssmil::synth::{generate_dataset, BagSpec, Dataset, Split, DEFAULT_TEST_FRACTION};
use ssmil::{Error, ModelParams, Result};

#[derive(Parser)]
#[command(name = "ssmil", version, about = "Selective state-space MIL on synthetic grid bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        /// `key = value` bag spec; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bags per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
        test_fraction: f64,
    },
    /// Train on the train split, save a checkpoint and report test metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch loss and accuracy CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Test-split metrics CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate once per value of one config key.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=v1,v2,...`; `r` stands for `cts_ratio`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Decay factor of the first block versus token distance.
    AnalyzeDecay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        cts: Switch,
        /// Bag to probe; the first test bag when omitted.
        #[arg(long)]
        bag: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine similarity of every token to an anchor token.
    AnalyzeAnchor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bag: String,
        /// Token index; the most central positive token when omitted.
        #[arg(long)]
        anchor: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel locality and top-K membership over a split.
    AnalyzeLocality {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
        k: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    Ok(fs::write(path, text)?)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ModelConfig> {
    let mut config = match path {
        Some(p) => ModelConfig::parse(&read_text(p)?)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn nonempty(ds: &Dataset, split: Split) -> Result<Vec<&ssmil::synth::Bag>> {
    let bags = ds.split(split);
    if bags.is_empty() {
        return Err(Error::Contract(format!("{split:?} split is empty").to_lowercase()));
    }
    Ok(bags)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed, n, test_fraction } => {
            let spec = match spec {
                Some(p) => BagSpec::parse(&read_text(&p)?)?,
                None => BagSpec::default(),
            };
            let ds = generate_dataset(&spec, n, seed, test_fraction)?;
            ds.save(&out)?;
            println!("wrote {} bags to {}", ds.bags.len(), out.display());
        }
        Command::Train { data, config, out, seed, history, report } => {
            let config = load_config(config.as_deref(), seed)?;
            let ds = Dataset::load(&data)?;
            let outcome = train::<f64>(&nonempty(&ds, Split::Train)?, &config, ds.classes())?;
            save_checkpoint(&outcome.params, &out)?;
            if let Some(h) = history {
                write(&h, &outcome.history_csv())?;
            }
            if let Some(last) = outcome.history.last() {
                println!("epoch {} loss {} train_acc {}", last.epoch, last.mean_loss, last.train_acc);
            }
            let test = ds.split(Split::Test);
            if !test.is_empty() {
                let m = evaluate(&outcome.params, &test)?;
                if let Some(r) = report {
                    write(&r, &m.to_csv())?;
                }
                print!("{}", m.to_csv());
            }
        }
        Command::Eval { data, ckpt, split, report } => {
            let params: ModelParams = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let m = evaluate(&params, &nonempty(&ds, split)?)?;
            write(&report, &m.to_csv())?;
            print!("{}", m.to_csv());
        }
        Command::Ablate { data, config, grid, seed, report } => {
            let base = load_config(config.as_deref(), seed)?;
            let (key, values) = grid
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid `{grid}` is not key=v1,v2,...")))?;
            let key = match key.trim() {
                "r" => "cts_ratio",
                k => k,
            };
            let ds = Dataset::load(&data)?;
            let (train_bags, test_bags) = (nonempty(&ds, Split::Train)?, nonempty(&ds, Split::Test)?);
            let mut csv = format!("{key},auc,acc,macro_f1\n");
            for value in values.split(',').map(str::trim) {
                let mut config = base.clone();
                config.set(key, value)?;
                config.validate()?;
                let outcome = train::<f64>(&train_bags, &config, ds.classes())?;
                let m = evaluate(&outcome.params, &test_bags)?;
                let row = format!("{value},{},{},{}\n", m.auc, m.acc, m.macro_f1);
                print!("{row}");
                csv.push_str(&row);
            }
            write(&report, &csv)?;
        }
        Command::AnalyzeDecay { ckpt, data, cts, bag, out } => {
            let params: ModelParams = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let bag = match bag {
                Some(id) => ds.bag(&id).ok_or_else(|| Error::Contract(format!("no bag `{id}`")))?,
                None => nonempty(&ds, Split::Test)?[0],
            };
            let rows = model_decay(&params, bag, matches!(cts, Switch::On))?;
            write(&out, &decay_csv(&rows))?;
            println!("wrote {} distances for {}", rows.len(), bag.id);
        }
        Command::AnalyzeAnchor { data, bag, anchor, out } => {
            let ds = Dataset::load(&data)?;
            let bag = ds.bag(&bag).ok_or_else(|| Error::Contract(format!("no bag `{bag}`")))?;
            let anchor = match anchor {
                Some(a) => a,
                None => positive_anchor(bag)
                    .ok_or_else(|| Error::Contract(format!("bag {} has no positive token; pass --anchor", bag.id)))?,
            };
            write(&out, &anchor_csv(&analyze_anchor(bag, anchor)?))?;
            println!("anchor {anchor} of {}", bag.id);
        }
        Command::AnalyzeLocality { ckpt, data, k, split, out } => {
            let params: ModelParams = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let rows = analyze_locality(&params, &nonempty(&ds, split)?, &k)?;
            write(&out, &locality_csv(&rows, &k))?;
            println!("ranked {} channels", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_parse() { 2 } else { 1 })
        }
    }
}
