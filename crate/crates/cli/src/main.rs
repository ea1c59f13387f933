mod table;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use privdfs::at::{at_train, AtLog};
use privdfs::attack::{compromise_scenario, cross_key_attack, per_branch_attack, AttackReport, AttackerKind};
use privdfs::config::RunConfig;
use privdfs::data::{decode_samples, encode_samples, threat_split, Sample, ThreatLevel};
use privdfs::dfs::{Ablation, DfsPolicy};
use privdfs::keyed::{format_keys, PolicyFamily};
use privdfs::metrics::flops::flops_count;
use privdfs::model::io::{load, save};
use privdfs::model::{evaluate_accuracy, single_share_probe, train_task, ModelBundle};
use privdfs::transport::{client_infer, BranchServer, ClusterConfig, ServerOptions};

use table::{f, Table};

#[derive(Parser)]
#[command(name = "privdfs", version, about = "Private split inference with distributed feature sharing")]
struct Cli {
    /// Record file for the tables this command prints. Defaults to
    /// `<command>.records` in the current directory.
    #[arg(long, global = true)]
    records: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw policy keys from OS entropy.
    Keygen {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Key file to write; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a base model (one key) or a keyed family (several keys).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adversarially harden a trained model against per-branch inverters.
    Harden {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Policy key to harden; the model's first key by default.
        #[arg(long, value_parser = parse_hex)]
        key: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one branch network as a server.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        branch: usize,
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: String,
        #[arg(long, default_value_t = 0)]
        server_id: u64,
    },
    /// Distributed inference over a running cluster.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_hex)]
        key: Option<u64>,
        /// Comma-separated server addresses, in branch order.
        #[arg(long, value_delimiter = ',', required = true)]
        servers: Vec<String>,
        /// Dataset cache file as written by `dataset`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2000)]
        timeout_ms: u64,
        /// Fixed noise nonce; drawn from OS entropy per sample when omitted.
        #[arg(long)]
        nonce: Option<u64>,
    },
    /// Inversion attack on the shares of one policy.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_level)]
        level: ThreatLevel,
        #[arg(long, default_value = "ridge")]
        attacker: AttackerKind,
        #[arg(long, value_parser = parse_hex)]
        key: Option<u64>,
        /// Train the inverters under this key instead, then attack `--key`.
        #[arg(long, value_parser = parse_hex)]
        cross_key: Option<u64>,
        /// Number of colluding servers whose shares are pooled.
        #[arg(long)]
        compromise: Option<usize>,
        /// Permit a dishonest majority for `--compromise` (diagnostic runs).
        #[arg(long)]
        allow_majority: bool,
    },
    /// Accuracy, single-share probes, client cost and the hardening curve.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Retrain with one DFS stage disabled and compare against the full pipeline.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Stage name (`LocConf`, `OrthoRcb`, `AdaNoise`, `ChanPerm`,
        /// `PatchReorg`, `CrossMix`) or `ncs`.
        #[arg(long)]
        stage: String,
        /// Already trained full-pipeline model; retrained when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Write the configured train or test split as a dataset cache file.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_hex(s: &str) -> std::result::Result<u64, String> {
    u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(|e| format!("{s:?} is not a hex key: {e}"))
}

fn parse_level(s: &str) -> std::result::Result<ThreatLevel, String> {
    let v: u8 = s.parse().map_err(|_| format!("level {s:?} is not 1, 2 or 3"))?;
    ThreatLevel::try_from(v).map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let (name, tables) = match cli.command {
        Command::Keygen { count, out } => return keygen(count, out.as_deref()),
        Command::Serve { model, branch, listen, server_id } => return serve(&model, branch, &listen, server_id),
        Command::Train { config, out } => ("train", train(&config, &out)?),
        Command::Harden { model, config, lambda, rounds, key, out } => {
            ("harden", harden(&model, config.as_deref(), lambda, rounds, key, &out)?)
        }
        Command::Infer { model, key, servers, input, timeout_ms, nonce } => {
            ("infer", infer(&model, key, servers, &input, timeout_ms, nonce)?)
        }
        Command::Attack { model, config, level, attacker, key, cross_key, compromise, allow_majority } => {
            let bundle = load(&model).with_context(|| format!("loading {}", model.display()))?;
            let cfg = run_config(config.as_deref())?;
            let opts = AttackOpts { level, attacker, key, cross_key, compromise, allow_majority };
            ("attack", vec![attack_table(&attack(&bundle, &cfg, &opts)?)])
        }
        Command::Eval { model, config } => ("eval", eval(&model, config.as_deref())?),
        Command::Ablate { config, stage, baseline } => ("ablate", ablate(&config, &stage, baseline.as_deref())?),
        Command::Dataset { config, split, out } => return dataset(&config, &split, &out),
    };
    let mut records = String::new();
    for t in &tables {
        print!("{}", t.render());
        records.push_str(&t.records());
    }
    let path = cli.records.unwrap_or_else(|| PathBuf::from(format!("{name}.records")));
    std::fs::write(&path, records).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn select_policy(family: &PolicyFamily, key: Option<u64>) -> Result<&DfsPolicy> {
    match key {
        None => Ok(family.policy(0)),
        Some(k) => match family.index_of(k) {
            Some(i) => Ok(family.policy(i)),
            None => bail!("key {k:016x} is not one of the model's keys"),
        },
    }
}

fn keygen(count: usize, out: Option<&Path>) -> Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let mut keys: Vec<u64> = Vec::with_capacity(count);
    while keys.len() < count {
        let k = getrandom::u64().map_err(|e| anyhow::anyhow!("OS entropy unavailable: {e}"))?;
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let text = format_keys(&keys);
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<Vec<Table>> {
    let cfg = RunConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let keys = cfg.keys()?;
    let data = cfg.data.load(&cfg.arch)?;
    let mut bundle = ModelBundle::new(cfg.arch.clone(), cfg.dfs.clone(), keys, cfg.init_seed)?;
    let family = bundle.family()?;
    let log = train_task(&mut bundle, &data.train, &family, &cfg.train)?;
    save(&bundle, out).with_context(|| format!("writing {}", out.display()))?;

    let mut epochs = Table::new("epoch", &["epoch", "loss", "train_accuracy"]);
    for e in &log {
        epochs.push(vec![e.epoch.to_string(), f(e.loss, 6), f(e.accuracy, 6)]);
    }
    Ok(vec![epochs, accuracy_table(&bundle, &family, &data.test)?])
}

fn accuracy_table(bundle: &ModelBundle, family: &PolicyFamily, test: &[Sample]) -> Result<Table> {
    let mut t = Table::new("accuracy", &["policy", "key", "test_accuracy"]);
    for i in 0..family.len() {
        let acc = evaluate_accuracy(bundle, test, family.policy(i), 1)?;
        t.push(vec![i.to_string(), format!("{:016x}", family.keys[i]), f(acc, 6)]);
    }
    Ok(t)
}

fn harden(
    model: &Path,
    config: Option<&Path>,
    lambda: Option<f64>,
    rounds: Option<usize>,
    key: Option<u64>,
    out: &Path,
) -> Result<Vec<Table>> {
    let mut bundle = load(model).with_context(|| format!("loading {}", model.display()))?;
    let mut cfg = run_config(config)?;
    if let Some(l) = lambda {
        cfg.at.lambda = l;
    }
    if let Some(r) = rounds {
        cfg.at.rounds = r;
    }
    let data = cfg.data.load(&bundle.arch)?;
    let family = bundle.family()?;
    let policy = select_policy(&family, key)?.clone();
    let log = at_train(&mut bundle, &policy, &data.train, &data.test, &cfg.at)?;
    save(&bundle, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(vec![at_table(&log)])
}

fn at_table(log: &AtLog) -> Table {
    let mut t = Table::new("at", &["lambda", "round", "accuracy", "ssim", "mse", "psnr", "ar_loss"]);
    for r in &log.rounds {
        t.push(vec![
            log.lambda.to_string(),
            r.round.to_string(),
            f(r.accuracy, 6),
            f(r.ssim, 6),
            f(r.mse, 8),
            f(r.psnr, 6),
            f(r.ar_loss, 6),
        ]);
    }
    t
}

fn serve(model: &Path, branch: usize, listen: &str, server_id: u64) -> Result<()> {
    let bundle = load(model).with_context(|| format!("loading {}", model.display()))?;
    if branch >= bundle.num_branches() {
        bail!("--branch {branch} but the model has {} branches", bundle.num_branches());
    }
    let opts = ServerOptions { server_id, ..ServerOptions::default() };
    let server = BranchServer::bind(listen, bundle.branch(branch).clone(), branch as u8, opts)
        .with_context(|| format!("binding {listen}"))?;
    println!("serving branch {branch} on {}", server.local_addr());
    loop {
        std::thread::park();
    }
}

fn infer(
    model: &Path,
    key: Option<u64>,
    servers: Vec<String>,
    input: &Path,
    timeout_ms: u64,
    nonce: Option<u64>,
) -> Result<Vec<Table>> {
    let bundle = load(model).with_context(|| format!("loading {}", model.display()))?;
    let family = bundle.family()?;
    let policy = select_policy(&family, key)?;
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let samples = decode_samples(&bytes)?;
    let cluster = ClusterConfig { servers, timeout_ms, ..ClusterConfig::default() };

    let classes = bundle.arch.classes;
    let names: Vec<String> = (0..classes).map(|c| format!("p{c}")).collect();
    let mut columns = vec!["sample", "label", "predicted"];
    columns.extend(names.iter().map(String::as_str));
    let mut t = Table::new("infer", &columns);
    for (i, s) in samples.iter().enumerate() {
        let n = match nonce {
            Some(n) => n.wrapping_add(i as u64),
            None => getrandom::u64().map_err(|e| anyhow::anyhow!("OS entropy unavailable: {e}"))?,
        };
        let probs = client_infer(&bundle, policy, &s.image, &cluster, n)?;
        let pred = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(c, _)| c);
        let mut row = vec![i.to_string(), s.label.to_string(), pred.to_string()];
        row.extend(probs.iter().map(|&p| f(p, 6)));
        t.push(row);
    }
    Ok(vec![t])
}

struct AttackOpts {
    level: ThreatLevel,
    attacker: AttackerKind,
    key: Option<u64>,
    cross_key: Option<u64>,
    compromise: Option<usize>,
    allow_majority: bool,
}

fn attack(bundle: &ModelBundle, cfg: &RunConfig, o: &AttackOpts) -> Result<AttackReport> {
    let data = cfg.data.load(&bundle.arch)?;
    let family = bundle.family()?;
    let policy = select_policy(&family, o.key)?;
    let split = threat_split(&data, o.level, cfg.threat.budget, cfg.attack.seed)?;
    let report = match (o.cross_key, o.compromise) {
        (Some(_), Some(_)) => bail!("--cross-key and --compromise are separate experiments"),
        (Some(k), None) => {
            let trained = select_policy(&family, Some(k))?;
            let mut r = cross_key_attack(bundle, trained, policy, &split.attacker, &split.eval, o.attacker, &cfg.attack)?;
            r.level = o.level as u8;
            r
        }
        (None, Some(m)) => {
            let mut r = compromise_scenario(
                bundle,
                &bundle.dfs,
                policy,
                m,
                o.allow_majority,
                &split.attacker,
                &split.eval,
                o.attacker,
                &cfg.attack,
            )?;
            r.level = o.level as u8;
            r
        }
        (None, None) => per_branch_attack(bundle, policy, &split.attacker, &split.eval, o.level, o.attacker, &cfg.attack)?,
    };
    Ok(report)
}

fn attack_table(r: &AttackReport) -> Table {
    let mut t = Table::new(
        "attack",
        &["level", "attacker", "key", "trained_key", "scope", "n", "psnr", "psnr_std", "ssim", "ssim_std", "mse", "mse_std", "lpips"],
    );
    for row in &r.rows {
        t.push(vec![
            r.level.to_string(),
            r.attacker.to_string(),
            r.key_id.to_string(),
            r.trained_key_id.map_or("-".to_string(), |k| k.to_string()),
            row.scope.clone(),
            row.samples.to_string(),
            f(row.psnr, 6),
            f(row.psnr_std, 6),
            f(row.ssim, 6),
            f(row.ssim_std, 6),
            f(row.mse, 8),
            f(row.mse_std, 8),
            row.lpips.map_or("NA".to_string(), |v| f(v, 6)),
        ]);
    }
    t
}

fn eval(model: &Path, config: Option<&Path>) -> Result<Vec<Table>> {
    let bundle = load(model).with_context(|| format!("loading {}", model.display()))?;
    let cfg = run_config(config)?;
    let data = cfg.data.load(&bundle.arch)?;
    let family = bundle.family()?;
    let mut tables = vec![accuracy_table(&bundle, &family, &data.test)?];

    let policy = family.policy(0);
    let mut probes = Table::new("probe", &["branch", "probe_accuracy"]);
    for b in 0..bundle.num_branches() {
        let acc = single_share_probe(&bundle, &data.train, &data.test, policy, &[b], &cfg.probe)?;
        probes.push(vec![format!("b{b}"), f(acc, 6)]);
    }
    tables.push(probes);

    let fl = flops_count(&bundle.arch, &bundle.dfs);
    let mut flops = Table::new("flops", &["encoder", "dfs", "client", "server_branch", "fusion", "deep_split_client", "client_ratio"]);
    flops.push(vec![
        fl.encoder.to_string(),
        fl.dfs.total().to_string(),
        fl.client.to_string(),
        fl.server_branch.to_string(),
        fl.fusion.to_string(),
        fl.deep_split_client.to_string(),
        f(fl.client_ratio(), 6),
    ]);
    tables.push(flops);

    if let Some(log) = &bundle.at_log {
        tables.push(at_table(log));
    }
    Ok(tables)
}

fn ablate(config: &Path, stage: &str, baseline: Option<&Path>) -> Result<Vec<Table>> {
    let cfg = RunConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let ablation: Ablation = stage.parse()?;
    if ablation == Ablation::None {
        bail!("--stage names the stage to disable");
    }
    let keys = cfg.keys()?;
    let data = cfg.data.load(&cfg.arch)?;
    let opts = AttackOpts {
        level: cfg.threat.level,
        attacker: AttackerKind::Ridge,
        key: None,
        cross_key: None,
        compromise: None,
        allow_majority: false,
    };

    let fit = |ablation: Ablation| -> Result<ModelBundle> {
        let dfs = privdfs::dfs::DfsConfig { ablation, ..cfg.dfs.clone() };
        let mut b = ModelBundle::new(cfg.arch.clone(), dfs, keys.clone(), cfg.init_seed)?;
        let fam = b.family()?;
        train_task(&mut b, &data.train, &fam, &cfg.train)?;
        Ok(b)
    };
    let full = match baseline {
        Some(p) => load(p).with_context(|| format!("loading {}", p.display()))?,
        None => fit(Ablation::None)?,
    };
    if full.dfs.ablation != Ablation::None {
        bail!("baseline model was itself trained with ablation {}", full.dfs.ablation);
    }
    let ablated = fit(ablation)?;

    let mut t = Table::new("ablation", &["variant", "accuracy", "psnr", "ssim"]);
    for b in [&full, &ablated] {
        let fam = b.family()?;
        let acc = evaluate_accuracy(b, &data.test, fam.policy(0), 1)?;
        let row = attack(b, &cfg, &opts)?.headline().clone();
        t.push(vec![b.dfs.ablation.to_string(), f(acc, 6), f(row.psnr, 6), f(row.ssim, 6)]);
    }
    Ok(vec![t])
}

fn dataset(config: &Path, split: &str, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let data = cfg.data.load(&cfg.arch)?;
    let samples = match split {
        "train" => &data.train,
        "test" => &data.test,
        other => bail!("--split {other:?}: expected train or test"),
    };
    std::fs::write(out, encode_samples(samples)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}
