use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use traceprop::checkpoint::{load_checkpoint_into, save_checkpoint};
use traceprop::config::{parse_pairs, Config};
use traceprop::cost::{cost_report, sweep, sweep_csv};
use traceprop::data::{
    bin_events, kshot_split, load_container, normalize_counts, read_event_csv, save_container, user_shift, BinMode,
    BinOptions, FrameTensor,
};
use traceprop::metrics::{MetricsRecord, MetricsSink, StreamSink};
use traceprop::oracle::{gradcheck, DEFAULT_STEP};
use traceprop::train::{evaluate, finetune, train};
use traceprop::{Network32, Result, TpError};

#[derive(Parser)]
#[command(name = "traceprop", version, about = "Train spiking networks with Traces Propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config entry, e.g. `--set epochs=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Line-delimited key=value metrics; a CSV summary goes next to it
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Single-threaded, bit-reproducible updates
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on the configured task
    Train(Common),
    /// Evaluate a checkpoint on the configured test data
    Eval {
        #[command(flatten)]
        common: Common,
        /// Container to evaluate instead of the configured test split
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a k-shot support set
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
    },
    /// Analytical MAC and memory cost of TP and TESS
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sweep_classes: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        sweep_batch: Vec<u64>,
        /// CSV destination; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the learning rule's gradient
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        h: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Bin an event CSV (sample,label,t_us,unit,polarity) into a TPDATA1 container
    ConvertEvents {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        units: usize,
        /// Defaults to the largest label plus one
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        window_us: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value = "binary")]
        mode: String,
        #[arg(long)]
        split_polarity: bool,
        /// Count mode only: clip counts here and rescale to [0, 1]
        #[arg(long, default_value_t = 15.0)]
        clip: f32,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let pairs = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| TpError::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| TpError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if common.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    Config::with_overrides(pairs, overrides)
}

fn csv_path(metrics: &Path) -> PathBuf {
    let mut name = metrics.as_os_str().to_owned();
    name.push(".csv");
    PathBuf::from(name)
}

fn sink(common: &Common) -> Result<Box<dyn MetricsSink>> {
    Ok(match &common.metrics_out {
        Some(p) => Box::new(StreamSink::new(
            BufWriter::new(File::create(p)?),
            Some(BufWriter::new(File::create(csv_path(p))?)),
        )),
        None => Box::new(StreamSink::new(io::stdout(), None::<io::Sink>)),
    })
}

fn network(cfg: &Config, common: &Common, data: &FrameTensor) -> Result<Network32> {
    let mut net: Network32 = cfg.build_network(Some(data))?;
    if let Some(p) = &common.checkpoint_in {
        load_checkpoint_into(&mut net, p)?;
    }
    Ok(net)
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (train_data, test) = cfg.load_task()?;
    let mut net = network(&cfg, common, &train_data)?;
    let mut sink = sink(common)?;
    let summary = train(&mut net, &train_data, test.as_ref(), &cfg.train_config(), sink.as_mut())?;
    drop(sink);
    if let Some(p) = &common.checkpoint_out {
        save_checkpoint(&net, p)?;
    }
    let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "trained {} epochs: final_accuracy={} best_accuracy={}",
        summary.epochs,
        fmt(summary.final_accuracy),
        fmt(summary.best_accuracy)
    );
    Ok(())
}

fn cmd_eval(common: &Common, data: Option<&PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let set = match data {
        Some(p) => load_container(p)?,
        None => {
            let (train_data, test) = cfg.load_task()?;
            test.unwrap_or(train_data)
        }
    };
    let net = network(&cfg, common, &set)?;
    let ev = evaluate(&net, &set, cfg.batch_size)?;
    let silhouette = if cfg.silhouette {
        ev.layer_silhouettes(&set.labels).unwrap_or_default()
    } else {
        Vec::new()
    };
    let mut sink = sink(common)?;
    sink.record(&MetricsRecord {
        epoch: 0,
        split: "eval".into(),
        accuracy: ev.accuracy,
        best_accuracy: ev.accuracy,
        layer_loss: Vec::new(),
        silhouette,
        wall_clock: 0.0,
    })?;
    drop(sink);
    println!("accuracy={:.4}", ev.accuracy);
    println!("confusion (rows = true class):");
    for row in &ev.confusion.counts {
        println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}

fn cmd_finetune(common: &Common, k: Option<usize>, epochs: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let (_, base) = cfg.load_task()?;
    let user = match &cfg.finetune.data {
        Some(p) => load_container(p)?,
        None => {
            let template = cfg
                .synth_template()?
                .ok_or_else(|| TpError::Config("finetune needs finetune.data or a synthetic task".into()))?;
            user_shift(&template, cfg.finetune.shift, cfg.finetune.shift_seed)?
                .generate(cfg.finetune.user_samples_per_class, cfg.finetune.shift_seed.wrapping_add(1))
        }
    };
    let split = kshot_split(
        &user,
        k.unwrap_or(cfg.finetune.k),
        cfg.finetune.support_fraction,
        cfg.seed.wrapping_add(13),
    )?;
    let mut net = network(&cfg, common, &user)?;
    let mut tc = cfg.train_config();
    tc.epochs = epochs;
    let mut sink = sink(common)?;
    let report = finetune(&mut net, &split, base.as_ref(), &tc, sink.as_mut())?;
    drop(sink);
    if let Some(p) = &common.checkpoint_out {
        save_checkpoint(&net, p)?;
    }
    println!(
        "support={} query={} query_before={:.4} query_after={:.4} improvement_pp={:.2}",
        split.support.len(),
        split.query.len(),
        report.query_before,
        report.query_after,
        100.0 * report.improvement()
    );
    if let (Some(b), Some(a), Some(f)) = (report.base_before, report.base_after, report.forgetting) {
        println!("base_before={b:.4} base_after={a:.4} forgetting_pp={:.2}", 100.0 * f);
    }
    Ok(())
}

fn write_out(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_cost(config: Option<&PathBuf>, classes: &[u64], batches: &[u64], out: Option<&PathBuf>) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::parse("")?,
    };
    let base = cfg.arch_spec()?;
    let rows = if classes.is_empty() && batches.is_empty() {
        vec![(base.batch, base.classes, cost_report(&base)?)]
    } else {
        let b = if batches.is_empty() { vec![base.batch] } else { batches.to_vec() };
        let o = if classes.is_empty() { vec![base.classes] } else { classes.to_vec() };
        sweep(&base, &b, &o)?
    };
    write_out(out, &sweep_csv(&rows))
}

fn cmd_gradcheck(instances: usize, seed: u64, h: f64, report: Option<&PathBuf>) -> Result<bool> {
    if instances == 0 {
        return Err(TpError::Config("need at least one instance".into()));
    }
    let r = gradcheck(instances, seed, h)?;
    let text = r.to_text();
    match report {
        Some(p) => {
            std::fs::write(p, &text)?;
            println!(
                "{} instances, max_rel_error={:.3e} {}",
                r.results.len(),
                r.max_error(),
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        None => print!("{text}"),
    }
    Ok(r.passed())
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    input: &Path,
    output: &Path,
    units: usize,
    classes: Option<usize>,
    window_us: u64,
    steps: usize,
    mode: &str,
    split_polarity: bool,
    clip: f32,
) -> Result<()> {
    let mode: BinMode = mode.parse()?;
    if steps == 0 {
        return Err(TpError::Config("--steps must be positive".into()));
    }
    if !(clip > 0.0) {
        return Err(TpError::Config("--clip must be positive".into()));
    }
    let opts = BinOptions {
        window_us,
        max_steps: steps,
        mode,
        split_polarity,
    };
    let records = read_event_csv(BufReader::new(File::open(input)?), units, None)?;
    if records.is_empty() {
        return Err(TpError::Format { offset: 0, message: "no events".into() });
    }
    let features = if split_polarity { 2 * units } else { units };
    let mut data = ndarray::Array3::<f32>::zeros((records.len(), steps, features));
    let mut labels = Vec::with_capacity(records.len());
    for (i, (label, stream)) in records.iter().enumerate() {
        let mut frames = bin_events(stream, &opts)?;
        if mode == BinMode::Count {
            normalize_counts(&mut frames, clip);
        }
        data.index_axis_mut(ndarray::Axis(0), i).assign(&frames);
        labels.push(*label);
    }
    let num_classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(TpError::Config(format!("label {bad} is outside {num_classes} classes")));
    }
    let n = labels.len();
    save_container(&FrameTensor::new(data, labels, num_classes)?, output)?;
    println!("wrote {n} samples, {steps} steps, {features} features, {num_classes} classes");
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(c) => cmd_train(c)?,
        Command::Eval { common, data } => cmd_eval(common, data.as_ref())?,
        Command::Finetune { common, k, epochs } => cmd_finetune(common, *k, *epochs)?,
        Command::Cost {
            config,
            sweep_classes,
            sweep_batch,
            out,
        } => cmd_cost(config.as_ref(), sweep_classes, sweep_batch, out.as_ref())?,
        Command::Gradcheck {
            instances,
            seed,
            h,
            report,
        } => {
            if !cmd_gradcheck(*instances, *seed, *h, report.as_ref())? {
                return Ok(4);
            }
        }
        Command::ConvertEvents {
            input,
            output,
            units,
            classes,
            window_us,
            steps,
            mode,
            split_polarity,
            clip,
        } => cmd_convert(input, output, *units, *classes, *window_us, *steps, mode, *split_polarity, *clip)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
