use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use sdae::data::{derive_seed, generate_synthetic, load_dataset, write_ppm, write_sdds, Dataset, Image, Source, SyntheticParams};
use sdae::eval::{compare_branches, linear_probe, results_csv, Backbone, Branch, FeatureSource, ProbeConfig};
use sdae::gradcheck::{end_to_end, kernel_suite};
use sdae::masking::{complexity_report, plan_for, report_csv, FeedingMode};
use sdae::training::{JsonLines, RunConfig, Trainer};
use sdae::vit::{attention_map, patchify, AttentionMap, ModelState};
use sdae::Error;

#[derive(Parser)]
#[command(name = "sdae", version, about = "Self-distilled masked autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain student and teacher.
    Pretrain(Common),
    /// Linear probe on frozen features of a checkpoint.
    Probe(Common),
    /// Finite-difference check of every kernel and the full loss.
    GradCheck(Common),
    /// Teacher attention cost of each feeding mode as CSV.
    Complexity(Common),
    /// Sample one mask plan, print it as a grid and as JSON.
    MaskDemo(Common),
    /// Class-token attention maps of one image.
    AttnDump(Common),
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic shapes dataset as a packed file.
    Synth(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in recipe: toy or base.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (1 = fully sequential).
    #[arg(long)]
    threads: Option<usize>,
    /// Any config key as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--key value")]
    overrides: Vec<String>,
}

/// Keys owned by a subcommand in addition to the run config. Order is the
/// order written to `resolved.config`.
fn local_keys(cmd: &str) -> Vec<(&'static str, &'static str)> {
    let data = [("data", "synthetic"), ("synth_items", "5000"), ("synth_seed", "1")];
    let probe = [
        ("test_data", "synthetic"),
        ("test_items", "1000"),
        ("test_seed", "2"),
        ("feature_source", "mean_pool"),
        ("probe_epochs", "500"),
        ("probe_lr", "0.02"),
        ("probe_weight_decay", "0.0001"),
        ("probe_seed", "0"),
    ];
    match cmd {
        "pretrain" => [&data[..], &[("resume", ""), ("until_epoch", "")]].concat(),
        "probe" => [&data[..], &probe[..], &[("checkpoint", ""), ("branch", "all")]].concat(),
        "grad-check" => vec![("cases", "5"), ("seed", "0"), ("fraction", "0.01")],
        "complexity" => vec![("n", "196"), ("d", "768"), ("r", "0.75"), ("r_c", "0.5"), ("t", "3")],
        "mask-demo" => {
            vec![("n", "64"), ("r", "0.75"), ("t", "3"), ("seed", "0"), ("mode", "multi_fold"), ("r_c", "0.5")]
        }
        "attn-dump" => vec![("checkpoint", ""), ("synth_seed", "1"), ("index", "0"), ("block", "")],
        "data synth" => vec![
            ("synth_items", "5000"),
            ("synth_seed", "1"),
            ("class_count", "8"),
            ("image_size", "32"),
            ("noise_std", "0.05"),
            ("color_jitter", "1.0"),
            ("clutter", "0"),
            ("file", "data.sdds"),
        ],
        _ => vec![],
    }
}

/// Subcommands that also carry the model/training config.
fn uses_run_config(cmd: &str) -> bool {
    matches!(cmd, "pretrain" | "probe" | "attn-dump")
}

struct Invocation {
    cmd: &'static str,
    run: RunConfig,
    local: BTreeMap<&'static str, String>,
    order: Vec<&'static str>,
    out: PathBuf,
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

impl Invocation {
    fn build(cmd: &'static str, common: &Common) -> anyhow::Result<Self> {
        let run = RunConfig::preset(&common.preset).map_err(|e| config_err(e.to_string()))?;
        let defaults = local_keys(cmd);
        let mut inv = Invocation {
            cmd,
            run,
            local: defaults.iter().map(|&(k, v)| (k, v.to_string())).collect(),
            order: defaults.iter().map(|&(k, _)| k).collect(),
            out: common.out.clone(),
        };
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| config_err(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
                inv.set(k.trim(), v.trim()).map_err(|e| config_err(format!("{}:{}: {e}", path.display(), n + 1)))?;
            }
        }
        let mut it = common.overrides.iter();
        while let Some(flag) = it.next() {
            let key = flag.strip_prefix("--").ok_or_else(|| config_err(format!("unexpected argument `{flag}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| config_err(format!("flag `--{key}` needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            inv.set(&key, &value).map_err(|e| config_err(e.to_string()))?;
        }
        if uses_run_config(cmd) {
            inv.run.validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(inv)
    }

    fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        if let Some(slot) = self.local.get_mut(key) {
            *slot = value.to_string();
            return Ok(());
        }
        if uses_run_config(self.cmd) {
            return self.run.set(key, value).map_err(|e| anyhow!("{e}"));
        }
        bail!("unknown flag `--{key}` for `{}`", self.cmd)
    }

    fn str(&self, key: &str) -> &str {
        &self.local[key]
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.local[key].parse().map_err(|e| config_err(format!("invalid value `{}` for `{key}`: {e}", self.local[key])))
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.local[key].is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn resolved_text(&self) -> String {
        let mut s = format!("# sdae {}\n", self.cmd);
        if !self.order.is_empty() {
            s.push_str("# command\n");
            for k in &self.order {
                let _ = writeln!(s, "{k} = {}", self.local[k]);
            }
        }
        if uses_run_config(self.cmd) {
            s.push_str(&self.run.to_text());
        }
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn dataset(&self, key: &str, items_key: &str, seed_key: &str) -> anyhow::Result<Dataset> {
        let spec = self.str(key);
        let source = if spec == "synthetic" {
            Source::Synthetic(SyntheticParams {
                n_items: self.get(items_key)?,
                seed: self.get(seed_key)?,
                image_size: self.run.model.image_size,
                ..Default::default()
            })
        } else {
            let path = PathBuf::from(spec);
            if path.is_dir() {
                Source::PpmDir { path }
            } else {
                Source::PackedFile { path }
            }
        };
        Ok(load_dataset(&source)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, common): (&'static str, &Common) = match &cli.command {
        Command::Pretrain(c) => ("pretrain", c),
        Command::Probe(c) => ("probe", c),
        Command::GradCheck(c) => ("grad-check", c),
        Command::Complexity(c) => ("complexity", c),
        Command::MaskDemo(c) => ("mask-demo", c),
        Command::AttnDump(c) => ("attn-dump", c),
        Command::Data(DataCommand::Synth(c)) => ("data synth", c),
    };
    match run(name, common) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_config = e.downcast_ref::<ConfigError>().is_some()
                || e.downcast_ref::<Error>().is_some_and(Error::is_config);
            ExitCode::from(if is_config { 1 } else { 2 })
        }
    }
}

fn run(name: &'static str, common: &Common) -> anyhow::Result<u8> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    let inv = Invocation::build(name, common)?;
    fs::create_dir_all(&inv.out).with_context(|| format!("creating {}", inv.out.display()))?;
    inv.write("resolved.config", inv.resolved_text().as_bytes())?;
    match name {
        "pretrain" => pretrain(&inv),
        "probe" => probe(&inv),
        "grad-check" => grad_check(&inv),
        "complexity" => complexity(&inv),
        "mask-demo" => mask_demo(&inv),
        "attn-dump" => attn_dump(&inv),
        "data synth" => data_synth(&inv),
        _ => unreachable!("subcommand table"),
    }
}

fn pretrain(inv: &Invocation) -> anyhow::Result<u8> {
    let data = inv.dataset("data", "synth_items", "synth_seed")?;
    let mut trainer = Trainer::new(inv.run.clone())?;
    if let Some(path) = inv.opt::<PathBuf>("resume")? {
        trainer.load(&path)?;
        info!("resumed from {} at epoch {}", path.display(), trainer.epoch);
    }
    let until = inv.opt::<usize>("until_epoch")?.unwrap_or(inv.run.train.epochs);
    let steps = File::create(inv.path("metrics.jsonl"))?;
    let mut sink = JsonLines(BufWriter::new(steps));
    let mut epochs = BufWriter::new(File::create(inv.path("epochs.jsonl"))?);
    let every = inv.run.train.checkpoint_every;
    while trainer.epoch < until {
        let m = trainer.train_epoch(&data, &mut sink)?;
        let line = json!({"epoch": m.epoch, "mean_loss": m.mean_loss, "lr": m.lr, "eta": m.eta, "seconds": m.seconds});
        writeln!(epochs, "{line}")?;
        epochs.flush()?;
        info!("epoch {} loss {:.5} lr {:.3e} eta {:.4}", m.epoch, m.mean_loss, m.lr, m.eta);
        if every > 0 && trainer.epoch % every == 0 {
            trainer.save(&inv.path(&format!("checkpoint-{:04}.sdae", trainer.epoch)))?;
        }
    }
    drop(sink);
    trainer.save(&inv.path("checkpoint.sdae"))?;
    Ok(0)
}

fn probe(inv: &Invocation) -> anyhow::Result<u8> {
    let checkpoint = inv.opt::<PathBuf>("checkpoint")?.ok_or_else(|| config_err("probe needs --checkpoint"))?;
    let mut trainer = Trainer::new(inv.run.clone())?;
    trainer.load(&checkpoint)?;
    let train = inv.dataset("data", "synth_items", "synth_seed")?;
    let test = inv.dataset("test_data", "test_items", "test_seed")?.with_stats_of(&train);
    let cfg = ProbeConfig {
        source: inv.get::<FeatureSource>("feature_source")?,
        epochs: inv.get("probe_epochs")?,
        lr: inv.get("probe_lr")?,
        weight_decay: inv.get("probe_weight_decay")?,
        branch: Branch::Student,
        seed: inv.get("probe_seed")?,
    };
    let results = match inv.str("branch") {
        "all" => compare_branches(&trainer.model, &trainer.teacher, &train, &test, &cfg)?.rows().map(Clone::clone).to_vec(),
        other => {
            let branch: Branch = other.parse().map_err(|e: Error| config_err(e.to_string()))?;
            let random;
            let backbone = match branch {
                Branch::Student => Backbone::student(&trainer.model),
                Branch::Teacher => Backbone::teacher(&trainer.teacher),
                Branch::RandomInit => {
                    random = ModelState::<f32>::new(inv.run.model.clone(), derive_seed(cfg.seed, &[0x5a4d]))?;
                    Backbone::student(&random)
                }
            };
            vec![linear_probe(backbone, &train, &test, &ProbeConfig { branch, ..cfg.clone() })?]
        }
    };
    let mut lines = String::new();
    for r in &results {
        let line = json!({"branch": r.branch.name(), "accuracy": r.accuracy, "n_eval": r.n_eval, "seed": r.seed});
        println!("{line}");
        let _ = writeln!(lines, "{line}");
    }
    inv.write("results.jsonl", lines.as_bytes())?;
    let label = checkpoint.display().to_string();
    let rows: Vec<_> = results.into_iter().map(|r| (label.clone(), r)).collect();
    inv.write("results.csv", results_csv(&rows).as_bytes())?;
    Ok(0)
}

fn grad_check(inv: &Invocation) -> anyhow::Result<u8> {
    let seed: u64 = inv.get("seed")?;
    let mut results = kernel_suite(inv.get("cases")?, seed)?;
    let kernels_ok = results.iter().all(|r| r.passed);
    let fraction: f64 = inv.get("fraction")?;
    for mode in [FeedingMode::MultiFold { folds: 3 }, FeedingMode::FullImage] {
        results.push(end_to_end(seed, fraction, mode)?);
    }
    let mut lines = String::new();
    for r in &results {
        let _ = writeln!(lines, "{}", serde_json::to_string(r)?);
        if !r.passed {
            eprintln!("FAIL {} case {}: relative error {:.3e}", r.kernel, r.case, r.max_rel_err);
        }
    }
    inv.write("gradcheck.jsonl", lines.as_bytes())?;
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed, worst relative error {worst:.3e}", results.len());
    Ok(if kernels_ok && results.iter().all(|r| r.passed) { 0 } else { 2 })
}

fn complexity(inv: &Invocation) -> anyhow::Result<u8> {
    let rows = complexity_report(inv.get("n")?, inv.get("d")?, inv.get("r")?, inv.get("r_c")?, inv.get("t")?)?;
    let csv = report_csv(&rows);
    print!("{csv}");
    inv.write("complexity.csv", csv.as_bytes())?;
    Ok(0)
}

fn mask_demo(inv: &Invocation) -> anyhow::Result<u8> {
    let mode = FeedingMode::parse(inv.str("mode"), inv.get("t")?, inv.get("r_c")?)?;
    let plan = plan_for(inv.get("n")?, inv.get("r")?, mode, inv.get("seed")?)?;
    print!("{}", plan.ascii_grid());
    let doc = json!({"visible": plan.visible, "folds": plan.folds});
    println!("{doc}");
    inv.write("plan.json", format!("{doc}\n").as_bytes())?;
    Ok(0)
}

fn attn_dump(inv: &Invocation) -> anyhow::Result<u8> {
    let mut trainer = Trainer::new(inv.run.clone())?;
    if let Some(path) = inv.opt::<PathBuf>("checkpoint")? {
        trainer.load(&path)?;
    }
    let cfg = &inv.run.model;
    let index: usize = inv.get("index")?;
    let params = SyntheticParams { n_items: index + 1, seed: inv.get("synth_seed")?, image_size: cfg.image_size, ..Default::default() };
    let data = generate_synthetic(&params)?;
    let patches = patchify(&data.standardized(index), cfg.image_size, cfg.channels, cfg.patch_size)?;
    let map = attention_map(&trainer.model, &patches, inv.opt("block")?)?;
    write_ppm(&inv.path("image.ppm"), &data.images[index])?;
    write_map(inv, "attention-mean.pgm", &map.mean, &map)?;
    for (h, head) in map.heads.iter().enumerate() {
        write_map(inv, &format!("attention-head{h}.pgm"), head, &map)?;
    }
    inv.write("attention.json", serde_json::to_string(&map)?.as_bytes())?;
    println!("block {} of {} heads written to {}", map.block, map.heads.len(), inv.out.display());
    Ok(0)
}

fn write_map(inv: &Invocation, name: &str, values: &[f32], map: &AttentionMap) -> anyhow::Result<()> {
    inv.write(name, &AttentionMap::to_pgm(values, map.grid_side))
}

fn data_synth(inv: &Invocation) -> anyhow::Result<u8> {
    let params = SyntheticParams {
        n_items: inv.get("synth_items")?,
        seed: inv.get("synth_seed")?,
        class_count: inv.get("class_count")?,
        image_size: inv.get("image_size")?,
        noise_std: inv.get("noise_std")?,
        color_jitter: inv.get("color_jitter")?,
        clutter: inv.get("clutter")?,
        ..Default::default()
    };
    let data = generate_synthetic(&params)?;
    let file = inv.path(inv.str("file"));
    write_sdds(&file, &data)?;
    let preview = inv.path("preview.ppm");
    write_ppm(&preview, &mosaic(&data.images[..data.len().min(16)]))?;
    println!("{} images written to {}", data.len(), file.display());
    Ok(0)
}

/// Tiles up to 16 images into a 4-wide strip for eyeballing.
fn mosaic(images: &[Image]) -> Image {
    let s = images[0].size;
    let c = images[0].channels;
    let cols = 4;
    let rows = images.len().div_ceil(cols);
    let w = cols * s;
    let mut pixels = vec![0u8; rows * s * w * c];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * s, (i % cols) * s);
        for y in 0..s {
            let dst = ((r0 + y) * w + c0) * c;
            pixels[dst..dst + s * c].copy_from_slice(&img.pixels[y * s * c..(y + 1) * s * c]);
        }
    }
    // PPM here is square only, so pad to a square canvas
    let side = w.max(rows * s);
    let mut square = vec![0u8; side * side * c];
    for y in 0..rows * s {
        square[y * side * c..y * side * c + w * c].copy_from_slice(&pixels[y * w * c..(y + 1) * w * c]);
    }
    Image { size: side, channels: c, pixels: square }
}
