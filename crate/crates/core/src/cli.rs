//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cluster::{evaluate_grouped, group_confusion, propose_merge, GroupScoring};
use crate::compress::measure_sizes;
use crate::error::{Error, Result};
use crate::fixture::{self, FixtureSpec};
use crate::infer::{bit_sweep, evaluate, load_dataset, ConfusionMatrix, GraphSpec, Network};
use crate::quant::{
    fold_batchnorm, quantize_model, Granularity, QuantScheme, QuantizeOptions, FP32_BITS, MAX_BITS,
    MIN_BITS,
};
use crate::shift::{bench_latency, MIN_BENCH_REPETITIONS};
use crate::stats::{
    be_csv_row, bit_efficiency_grouped, channel_quartiles, histogram_csv_rows, quartiles_csv_rows,
    weight_histogram, BE_CSV_HEADER, HISTOGRAM_CSV_HEADER, QUARTILES_CSV_HEADER,
};
use crate::store::{load_model, save_model, save_packed, ModelFile};

pub const THREADS_ENV: &str = "BITQUANT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "bitquant",
    version,
    about = "Data-free post-training weight quantization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a model; writes the dequantized model, packed codes and per-tensor bit efficiency.
    Quantize(QuantizeArgs),
    /// Accuracy of the f32 model and of each requested bit width.
    Eval(EvalArgs),
    /// Merge confusable classes and re-score.
    Cluster(ClusterArgs),
    /// Packed and deflated sizes plus weight distribution exports.
    Report(ReportArgs),
    /// Time f32 against shift-based dense layers.
    Bench(BenchArgs),
    /// Write the seeded synthetic task and its overlap variant.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Tensor,
    Channel,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Tensor => Granularity::PerTensor,
            GranularityArg::Channel => Granularity::PerChannel,
        }
    }
}

fn parse_scheme(s: &str) -> std::result::Result<QuantScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s.trim().parse::<u8>() {
        Ok(b) if (MIN_BITS..=MAX_BITS).contains(&b) => Ok(b),
        _ => Err(format!(
            "bit width must be an integer in {MIN_BITS}..={MAX_BITS}, got '{s}'"
        )),
    }
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once('x')
        .ok_or_else(|| format!("layer shape '{s}' is not ROWSxCOLS"))?;
    match (r.parse::<usize>(), c.parse::<usize>()) {
        (Ok(r), Ok(c)) if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(format!("bad layer shape '{s}'")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct QuantFlags {
    /// asymm, symm or pow2.
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<QuantScheme>,
    #[arg(long, value_enum, default_value = "tensor")]
    pub granularity: GranularityArg,
    #[arg(long)]
    pub quantize_bias: bool,
    /// Fold batch norm into the preceding conv or dense layer first.
    #[arg(long)]
    pub fold_bn: bool,
    /// Replace the model's graph with this file (accepts pad=same|valid).
    #[arg(long, value_name = "FILE")]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = fixture::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl QuantFlags {
    fn options(&self, scheme: QuantScheme, bits: u8) -> QuantizeOptions {
        QuantizeOptions {
            granularity: self.granularity.into(),
            quantize_bias: self.quantize_bias,
            fold_bn: self.fold_bn,
            ..QuantizeOptions::new(scheme, bits)
        }
    }

    fn scheme(&self) -> QuantScheme {
        self.scheme.unwrap_or(QuantScheme::UniformAsymm)
    }

    fn load(&self, path: &Path) -> Result<ModelFile> {
        let mut model = load_model(path)?;
        if let Some(g) = &self.graph {
            let text = std::fs::read_to_string(g).map_err(|e| Error::io(g, e))?;
            let mut spec = GraphSpec::parse_with_shorthand(&text)?;
            spec.resolve_padding(|name| model.tensor(name).and_then(|t| t.shape.get(2).copied()))?;
            model.graph = spec.to_text();
            model.validate()?;
        }
        Ok(model)
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    pub model: PathBuf,
    #[arg(long, value_parser = parse_bits, default_value = "8")]
    pub bits: u8,
    #[command(flatten)]
    pub flags: QuantFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_bits, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
    pub bits: Vec<u8>,
    #[command(flatten)]
    pub flags: QuantFlags,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Model to evaluate; omit when reading --confusion.
    #[arg(required_unless_present = "confusion", conflicts_with = "confusion")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub dataset: Option<PathBuf>,
    /// Confusion CSV as written by `eval`.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub merges: usize,
    /// Quantize before evaluating; f32 when absent.
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<u8>,
    /// Score groups by summed outputs instead of remapping the class argmax.
    #[arg(long)]
    pub logit_sum: bool,
    #[command(flatten)]
    pub flags: QuantFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub model: PathBuf,
    #[arg(long, value_parser = parse_bits, value_delimiter = ',', default_value = "6")]
    pub bits: Vec<u8>,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[command(flatten)]
    pub flags: QuantFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dense layer shapes as OUTxIN.
    #[arg(long, value_parser = parse_shape, value_delimiter = ',', default_value = "64x64,256x256,512x1024")]
    pub shapes: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = fixture::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = fixture::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value = "fixtures")]
    pub out: PathBuf,
}

fn header(cmd: &str, seed: u64) -> String {
    format!("# bitquant {cmd} seed={seed}\n")
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n = value
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Argument(format!(
                "{THREADS_ENV} must be a positive integer, got '{value}'"
            ))
        })?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs a parsed command and maps the outcome to a process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Cluster(a) => cmd_cluster(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Fixture(a) => cmd_fixture(&a),
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn bits_label(bits: u8) -> String {
    if bits == FP32_BITS {
        "fp32".into()
    } else {
        bits.to_string()
    }
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let model = a.flags.load(&a.model)?;
    let scheme = a.flags.scheme();
    let opts = a.flags.options(scheme, a.bits);
    let q = quantize_model(&model, &opts)?;
    let base = if opts.fold_bn {
        fold_batchnorm(&model)?
    } else {
        model
    };
    let mut csv = header("quantize", a.flags.seed);
    csv.push_str(BE_CSV_HEADER);
    csv.push('\n');
    for qt in &q.quantized {
        let orig = base
            .tensor(&qt.name)
            .ok_or_else(|| Error::Internal(format!("tensor '{}' missing", qt.name)))?;
        let deq = q
            .model
            .tensor(&qt.name)
            .expect("quantized tensors stay in the model");
        let be = bit_efficiency_grouped(orig, deq, a.bits, qt.params.len())?;
        be_csv_row(&mut csv, &qt.name, &scheme.to_string(), a.bits, &be);
    }
    let out = &a.flags.out;
    save_model_to(out, "dequantized.bqnt", &q.model)?;
    let packed = q.packed.as_ref().expect("bit width below 32 packs codes");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_packed(packed, out.join("packed.bqpk"))?;
    write_file(out, "bit_efficiency.csv", csv.as_bytes())?;
    print!("{csv}");
    println!(
        "# {} tensors quantized, packed payload {} bytes",
        q.quantized.len(),
        packed.payload_bytes()
    );
    Ok(())
}

fn save_model_to(dir: &Path, name: &str, model: &ModelFile) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(model, dir.join(name))
}

pub const SWEEP_CSV_HEADER: &str = "scheme,bits,accuracy_pct,samples,packed_bytes,avg_bit_levels";

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = a.flags.load(&a.model)?;
    let dataset = load_dataset(&a.dataset)?;
    let scheme = a.flags.scheme();
    let rows = bit_sweep(
        &model,
        &dataset,
        &a.flags.options(scheme, FP32_BITS),
        &a.bits,
    )?;
    let head = header("eval", a.flags.seed);
    let mut csv = format!("{head}{SWEEP_CSV_HEADER}\n");
    let mut table = format!(
        "{head}{:<6} {:>6} {:>10} {:>12} {:>10}\n",
        "scheme", "bits", "acc %", "packed B", "bit lvls"
    );
    for r in &rows {
        let levels = r
            .avg_bit_levels
            .map(|l| format!("{l:.2}"))
            .unwrap_or_default();
        writeln!(
            csv,
            "{scheme},{},{},{},{},{levels}",
            bits_label(r.bits),
            pct(r.result.accuracy),
            r.result.sample_count,
            r.packed_bytes
        )
        .unwrap();
        writeln!(
            table,
            "{:<6} {:>6} {:>10} {:>12} {:>10}",
            scheme.to_string(),
            bits_label(r.bits),
            pct(r.result.accuracy),
            r.packed_bytes,
            levels
        )
        .unwrap();
        let confusion = format!("{head}{}", r.result.confusion.to_csv());
        write_file(
            &a.flags.out,
            &format!("confusion_{}.csv", bits_label(r.bits)),
            confusion.as_bytes(),
        )?;
    }
    write_file(&a.flags.out, "sweep.csv", csv.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub const CLUSTER_CSV_HEADER: &str = "bits,merges,groups,accuracy_before_pct,accuracy_after_pct";

pub fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let head = header("cluster", a.flags.seed);
    let bits = a.bits.unwrap_or(FP32_BITS);
    let (confusion, grouped, grouping) = match (&a.confusion, &a.model) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cm = ConfusionMatrix::from_csv(&text)?;
            let g = propose_merge(&cm, a.merges)?;
            let gc = group_confusion(&cm, &g);
            (cm, gc, g)
        }
        (None, Some(model_path)) => {
            let dataset_path = a
                .dataset
                .as_ref()
                .ok_or_else(|| Error::Argument("--dataset is required with a model".into()))?;
            let model = a.flags.load(model_path)?;
            let dataset = load_dataset(dataset_path)?;
            let q = quantize_model(&model, &a.flags.options(a.flags.scheme(), bits))?;
            let net = Network::from_model(&q.model)?;
            let base = evaluate(&net, &dataset)?;
            let g = propose_merge(&base.confusion, a.merges)?;
            let scoring = if a.logit_sum {
                GroupScoring::SumOutputs
            } else {
                GroupScoring::RemapArgmax
            };
            let r = evaluate_grouped(&net, &dataset, &g, scoring)?;
            (base.confusion, r.confusion, g)
        }
        (None, None) => return Err(Error::Argument("need a model or --confusion".into())),
    };
    let out = &a.flags.out;
    write_file(
        out,
        "groups.txt",
        grouping.to_text(&confusion.class_names).as_bytes(),
    )?;
    write_file(
        out,
        "grouped_confusion.csv",
        format!("{head}{}", grouped.to_csv()).as_bytes(),
    )?;
    let row = format!(
        "{},{},{},{},{}\n",
        bits_label(bits),
        a.merges,
        grouping.num_groups(),
        pct(confusion.accuracy()),
        pct(grouped.accuracy())
    );
    write_file(
        out,
        "cluster.csv",
        format!("{head}{CLUSTER_CSV_HEADER}\n{row}").as_bytes(),
    )?;
    print!("{head}");
    println!("groups: {}", grouped.class_names.join(" | "));
    println!(
        "accuracy {}% -> {}% after {} merge(s)",
        pct(confusion.accuracy()),
        pct(grouped.accuracy()),
        a.merges
    );
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let model = a.flags.load(&a.model)?;
    let schemes: Vec<QuantScheme> = match a.flags.scheme {
        Some(s) => vec![s],
        None => QuantScheme::ALL.to_vec(),
    };
    let head = header("report", a.flags.seed);
    let base_opts = a.flags.options(schemes[0], FP32_BITS);
    let mut sizes = measure_sizes(&model, &schemes[..1], &[FP32_BITS], &base_opts)?;
    sizes
        .rows
        .extend(measure_sizes(&model, &schemes, &a.bits, &base_opts)?.rows);

    let base = if a.flags.fold_bn {
        fold_batchnorm(&model)?
    } else {
        model.clone()
    };
    let mut quartiles = format!("{head}{QUARTILES_CSV_HEADER}\n");
    let mut hist = format!("{head}{HISTOGRAM_CSV_HEADER}\n");
    let mut be = format!("{head}{BE_CSV_HEADER}\n");
    let mut first = true;
    for &scheme in &schemes {
        for &bits in &a.bits {
            let q = quantize_model(&model, &a.flags.options(scheme, bits))?;
            let variant = format!("{scheme}{bits}");
            for qt in &q.quantized {
                let orig = base.tensor(&qt.name).expect("selected from this model");
                let deq = q
                    .model
                    .tensor(&qt.name)
                    .expect("quantized tensors stay in the model");
                if first {
                    quartiles_csv_rows(
                        &mut quartiles,
                        &qt.name,
                        "fp32",
                        &channel_quartiles(orig, 0)?,
                    );
                    histogram_csv_rows(
                        &mut hist,
                        &qt.name,
                        "fp32",
                        &weight_histogram(orig, a.bins)?,
                    );
                }
                quartiles_csv_rows(
                    &mut quartiles,
                    &qt.name,
                    &variant,
                    &channel_quartiles(deq, 0)?,
                );
                histogram_csv_rows(
                    &mut hist,
                    &qt.name,
                    &variant,
                    &weight_histogram(deq, a.bins)?,
                );
                let report = bit_efficiency_grouped(orig, deq, bits, qt.params.len())?;
                be_csv_row(&mut be, &qt.name, &scheme.to_string(), bits, &report);
            }
            first = false;
        }
    }
    let out = &a.flags.out;
    write_file(
        out,
        "sizes.csv",
        format!("{head}{}", sizes.to_csv()).as_bytes(),
    )?;
    write_file(out, "quartiles.csv", quartiles.as_bytes())?;
    write_file(out, "histograms.csv", hist.as_bytes())?;
    write_file(out, "bit_efficiency.csv", be.as_bytes())?;
    print!("{head}{}", sizes.to_table());
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.reps < MIN_BENCH_REPETITIONS {
        return Err(Error::Argument(format!(
            "--reps must be at least {MIN_BENCH_REPETITIONS}"
        )));
    }
    let report = bench_latency(&a.shapes, a.reps, a.seed)?;
    let head = format!(
        "{}# reps={} threads=1 activations=i32 q16 accumulator=i64\n",
        header("bench", a.seed),
        a.reps
    );
    write_file(
        &a.out,
        "bench.csv",
        format!("{head}{}", report.to_csv()).as_bytes(),
    )?;
    print!("{head}{}", report.to_table());
    Ok(())
}

pub fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let mut specs = [
        ("task", FixtureSpec::standard(a.seed)),
        ("overlap", FixtureSpec::overlap(a.seed)),
    ];
    for (stem, spec) in specs.iter_mut() {
        if let Some(n) = a.samples {
            spec.samples = n;
        }
        let f = fixture::generate(spec)?;
        let (m, d) = f.write(&a.out, stem)?;
        println!(
            "{} ({} samples), {}",
            m.display(),
            f.dataset.len(),
            d.display()
        );
    }
    Ok(())
}
