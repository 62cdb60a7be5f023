//! `vpr`: fixture generation, training, descriptor extraction, evaluation and
//! attention dumps. Flags override values read from `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use vpr_core::eval::{recall_at_n, report_csv, report_table, DescriptorIndex, EvalQuery, DEFAULT_NS};
use vpr_core::io::{generate_fixture, load_label_map, save_label_map, Dataset, FixtureSpec, LabelMap, Manifest, Role};
use vpr_core::model::VprModel;
use vpr_core::train::{extract, fit, FitOutputs, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "vpr", version, about = "Attention-guided place recognition engine")]
struct Cli {
    /// Training configuration (TOML). Required by every command but `fixture`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed; for `fixture`, the fixture seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `extract`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic source/target fixture.
    Fixture(FixtureArgs),
    /// Train a model; writes model.vprc, metrics.csv and config.toml.
    Train(TrainArgs),
    /// Write the descriptors of a manifest split as a VPRD database.
    Extract(ExtractArgs),
    /// Print Recall@1/5/10 of queries against a gallery.
    Eval(EvalArgs),
    /// Write each image's attention map as an 8-bit PGM.
    AttnDump(AttnArgs),
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long, default_value_t = 32)]
    places: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Strength of the target-domain shift.
    #[arg(long, default_value_t = 0.3)]
    shift: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labelled source manifest.
    #[arg(long)]
    source: PathBuf,
    /// Unlabelled target manifest, needed when domain adaptation is on.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    no_ms_gem: bool,
    #[arg(long)]
    no_att: bool,
    #[arg(long)]
    no_semseg: bool,
    #[arg(long)]
    no_g_semseg: bool,
    #[arg(long)]
    no_da: bool,
    /// Also write the mined triplets to triplets.csv.
    #[arg(long)]
    log_triplets: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Roles to extract; all records when omitted.
    #[arg(long, value_delimiter = ',')]
    roles: Vec<Role>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Manifest holding the gallery records and their coordinates.
    #[arg(long)]
    gallery: PathBuf,
    /// Manifest holding the query records; defaults to the gallery manifest.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Precomputed gallery descriptors from `extract`.
    #[arg(long)]
    database: Option<PathBuf>,
    #[arg(long, default_value_t = 25.0)]
    radius: f64,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',')]
    roles: Vec<Role>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Fixture(_)) && cli.config.is_none() {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "this command needs --config <FILE>")
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // parser messages span lines; the diagnostic stays on one
            let msg = format!("{e:#}");
            let line: Vec<&str> = msg.split_whitespace().collect();
            eprintln!("error: {}", line.join(" "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Fixture(a) => cmd_fixture(a, cli.seed, require_out(out)?),
        Command::Train(a) => cmd_train(a, load_config(&cli)?, require_out(out)?),
        Command::Extract(a) => cmd_extract(a, &load_config(&cli)?, require_out(out)?),
        Command::Eval(a) => cmd_eval(a, &load_config(&cli)?, out),
        Command::AttnDump(a) => cmd_attn_dump(a, &load_config(&cli)?, require_out(out)?),
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.context("this command needs --out")
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let path = cli.config.as_ref().expect("checked in main");
    let mut config = TrainConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_dataset(path: &Path, config: &TrainConfig) -> Result<Dataset> {
    let manifest = Manifest::load(path)?;
    Dataset::load(manifest, config.semseg.classes).with_context(|| format!("loading {}", path.display()))
}

fn load_model(args: &ModelArgs, config: &TrainConfig) -> Result<VprModel> {
    let mut model = VprModel::new(config.model_config(), config.seed)?;
    let file =
        std::fs::File::open(&args.checkpoint).with_context(|| format!("cannot open {}", args.checkpoint.display()))?;
    model
        .params_mut()
        .load_checkpoint(std::io::BufReader::new(file))
        .with_context(|| {
            format!(
                "checkpoint {} does not fit the configuration",
                args.checkpoint.display()
            )
        })?;
    Ok(model)
}

fn select(dataset: &Dataset, roles: &[Role]) -> Vec<u64> {
    dataset
        .manifest()
        .records
        .iter()
        .filter(|r| roles.is_empty() || roles.contains(&r.role))
        .map(|r| r.id)
        .collect()
}

fn cmd_fixture(a: &FixtureArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let spec = FixtureSpec {
        seed: seed.unwrap_or(FixtureSpec::default().seed),
        places: a.places,
        views: a.views,
        height: a.size,
        width: a.size,
        domain_shift: a.shift,
        ..FixtureSpec::default()
    };
    let files = generate_fixture(&spec, out)?;
    for m in [&files.source_manifest, &files.target_manifest] {
        let n = Manifest::load(m)?.records.len();
        println!("{} ({n} records)", m.display());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, mut config: TrainConfig, out: &Path) -> Result<()> {
    if let Some(steps) = a.steps {
        config.train.steps = steps;
    }
    let flags = &mut config.ablation;
    flags.ms_gem &= !a.no_ms_gem;
    flags.att &= !a.no_att;
    flags.semseg &= !a.no_semseg;
    flags.g_semseg &= !a.no_g_semseg;
    flags.da &= !a.no_da;
    config.ablation = config.ablation.effective();
    config.validate()?;

    let source = load_dataset(&a.source, &config)?;
    let target = match &a.target {
        Some(p) if config.ablation.da => Some(load_dataset(p, &config)?),
        _ => None,
    };
    let report = fit(
        &config,
        &source,
        target.as_ref(),
        FitOutputs {
            dir: Some(out),
            triplet_log: a.log_triplets,
        },
    )?;
    // the written checkpoint must load back into the configured model
    load_model(
        &ModelArgs {
            checkpoint: out.join("model.vprc"),
        },
        &config,
    )?;
    if let Some(last) = report.metrics.last() {
        println!("{}", last.csv());
    }
    if let Some(v) = &report.validation {
        print!("{}", report_table(&[("source", v)]));
    }
    if report.unusable > 0 {
        println!("{} queries skipped: no triplet could be mined", report.unusable);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_extract(a: &ExtractArgs, config: &TrainConfig, out: &Path) -> Result<()> {
    let model = load_model(&a.model, config)?;
    let dataset = load_dataset(&a.manifest, config)?;
    let ids = select(&dataset, &a.roles);
    if ids.is_empty() {
        bail!("no records with the requested roles in {}", a.manifest.display());
    }
    let index = extract(&model, &dataset, &ids)?;
    let mut bytes = Vec::new();
    index.write(&mut bytes)?;
    if DescriptorIndex::read(bytes.as_slice())?.len() != ids.len() {
        bail!("descriptor database did not read back");
    }
    std::fs::write(out, bytes).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "{} descriptors of length {} to {}",
        ids.len(),
        index.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, config: &TrainConfig, out: Option<&Path>) -> Result<()> {
    let model = load_model(&a.model, config)?;
    let gallery = load_dataset(&a.gallery, config)?;
    let queries = match &a.queries {
        Some(p) => load_dataset(p, config)?,
        None => gallery.clone(),
    };
    let index = match &a.database {
        Some(p) => {
            let f = std::fs::File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
            DescriptorIndex::read(std::io::BufReader::new(f))?
        }
        None => extract(&model, &gallery, &select(&gallery, &[Role::Gallery]))?,
    };
    let coords = index
        .ids()
        .iter()
        .map(|&id| Ok((id, gallery.record(id)?.coord)))
        .collect::<Result<_>>()?;
    let mut probes = Vec::new();
    for id in select(&queries, &[Role::Query]) {
        probes.push(EvalQuery {
            id,
            coord: queries.record(id)?.coord,
            descriptor: model.describe(queries.image(id)?)?.into_vec(),
        });
    }
    let result = recall_at_n(&index, &coords, &probes, a.radius, &DEFAULT_NS)?;
    let label = a.queries.as_ref().unwrap_or(&a.gallery);
    let label = label.file_stem().and_then(|s| s.to_str()).unwrap_or("queries");
    print!("{}", report_table(&[(label, &result)]));
    if !result.excluded.is_empty() {
        println!(
            "{} queries had no gallery record within {} m",
            result.excluded.len(),
            a.radius
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("recall.csv"), report_csv(&[(label, &result)]))?;
    }
    Ok(())
}

/// Min-max scaling to 0..=255; a constant map becomes all zeros.
fn to_gray(values: &[f64], h: usize, w: usize) -> Result<LabelMap> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(LabelMap::new(h, w, data)?)
}

fn cmd_attn_dump(a: &AttnArgs, config: &TrainConfig, out: &Path) -> Result<()> {
    let model = load_model(&a.model, config)?;
    if model.attention().is_none() {
        bail!("attention is disabled in this configuration");
    }
    let dataset = load_dataset(&a.manifest, config)?;
    std::fs::create_dir_all(out)?;
    let ids = select(&dataset, &a.roles);
    for &id in &ids {
        let map = model.attention_map(dataset.image(id)?)?.expect("attention is on");
        let (_, h, w) = map.chw()?;
        let path = out.join(format!("{id}.pgm"));
        let gray = to_gray(map.data(), h, w)?;
        save_label_map(&path, &gray)?;
        if load_label_map(&path)? != gray {
            bail!("{} did not read back", path.display());
        }
    }
    println!("{} attention maps to {}", ids.len(), out.display());
    Ok(())
}
