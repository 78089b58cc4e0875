use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};

use dckg::config::{RunConfig, Variant};
use dckg::corpus::io::{read_pairs, read_sources, write_pairs};
use dckg::corpus::{generate_corpus, oracle_domain, KeywordPair, OracleClassifier, Vocabulary};
use dckg::eval::{
    build_report, generate_all, judge, model_perplexity, relevant_pool, sweep_beta, sweep_table, sweep_tsv, Outputs,
    References, ReportInputs,
};
use dckg::model::check::miniature_gradcheck;
use dckg::model::checkpoint::{self, dims_for, CONFIG_FILE};
use dckg::model::train::{train_supervised, TrainEvent};
use dckg::model::{generate, BetaSource, GenOptions, Mode, Model};
use dckg::rl::{train_rl, BetaSpace, NGramLM};

const SPLITS: [&str; 3] = ["train", "valid", "test"];
const LM_FILE: &str = "lm.counts";

/// Domain-constrained keyword generation.
///
/// Config precedence is flags > file > defaults. Commands that read a
/// checkpoint start from the checkpoint's own config instead of defaults.
#[derive(Parser, Debug)]
#[command(name = "dckg", version)]
struct Cli {
    /// Config file of `[section]` headers and `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed of the stage the command runs (corpus, training, RL or evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus splits.
    GenData {
        /// Output directory; defaults to `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised training; the variant comes from `model.variant`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the external LM and train the policy head by REINFORCE.
    TrainRl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate keywords for a file of source keywords, one per line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sources: PathBuf,
        #[arg(long, default_value = "dckg")]
        mode: Mode,
        /// Fixed β instead of the policy's choice.
        #[arg(long)]
        beta: Option<f64>,
        /// Outputs per source; defaults to `eval.samples`.
        #[arg(long)]
        count: Option<usize>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-β grid over held-out sources.
    SweepBeta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated βs; defaults to `eval.sweep_betas`.
        #[arg(long)]
        betas: Option<String>,
        /// Counts file of the external LM; fitted on the training split when absent.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics reports for one or more checkpoints over the same sources.
    ///
    /// `--checkpoint` and `--mode` pair up in order; relevance recall is
    /// pooled over all of them.
    Eval {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        mode: Vec<Mode>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full loss on a miniature model.
    Gradcheck {
        #[arg(long, default_value = "latent")]
        variant: Variant,
        #[arg(long, default_value_t = dckg::model::check::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
    },
}

struct Loaded {
    config: RunConfig,
    model: Model,
    step: u64,
    tau: f64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { out } => gen_data(&cli, out.as_deref()),
        Command::Train { data, out } => train(&cli, data.as_deref(), out),
        Command::TrainRl { checkpoint, data, out } => train_rl_cmd(&cli, checkpoint, data.as_deref(), out),
        Command::Generate {
            checkpoint,
            sources,
            mode,
            beta,
            count,
            out,
        } => generate_cmd(&cli, checkpoint, sources, *mode, *beta, *count, out.as_deref()),
        Command::SweepBeta {
            checkpoint,
            data,
            betas,
            lm,
            out,
        } => sweep_cmd(
            &cli,
            checkpoint,
            data.as_deref(),
            betas.as_deref(),
            lm.as_deref(),
            out.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            mode,
            data,
            lm,
            out,
        } => eval_cmd(&cli, checkpoint, mode, data.as_deref(), lm.as_deref(), out),
        Command::Gradcheck {
            variant,
            eps,
            threshold,
        } => gradcheck_cmd(&cli, *variant, *eps, *threshold),
    }
}

/// Layer the config file, `--set` overrides and `--seed` over `base`.
fn resolve(cli: &Cli, mut base: RunConfig, seed_keys: &[&str]) -> Result<RunConfig> {
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        base.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    base.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        for key in seed_keys {
            base.set(key, &seed.to_string())?;
        }
    }
    Ok(base)
}

fn load_checkpoint(cli: &Cli, dir: &Path, seed_keys: &[&str]) -> Result<Loaded> {
    let ck = checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let config = resolve(cli, ck.config.clone(), seed_keys)?;
    if config.model != ck.config.model || dims_for(&config)? != ck.model.dims {
        bail!(
            "model and vocabulary settings are fixed by the checkpoint {}; drop those overrides",
            dir.display()
        );
    }
    if ck.build != RunConfig::build_tag() {
        eprintln!(
            "note: checkpoint written by {}, running {}",
            ck.build,
            RunConfig::build_tag()
        );
    }
    Ok(Loaded {
        config,
        model: ck.model,
        step: ck.step,
        tau: ck.tau,
    })
}

fn data_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| PathBuf::from(&cfg.paths.data_dir), Path::to_path_buf)
}

/// Read one split, using the corpus settings the data was generated with.
fn read_split(dir: &Path, cfg: &RunConfig, name: &str) -> Result<(Vocabulary, Vec<KeywordPair>)> {
    let snapshot = dir.join(CONFIG_FILE);
    let corpus = if snapshot.exists() {
        let data_cfg = RunConfig::load(&snapshot)?;
        if data_cfg.corpus.layout() != cfg.corpus.layout() {
            bail!("{} was generated with a different vocabulary layout", dir.display());
        }
        data_cfg.corpus
    } else {
        cfg.corpus.clone()
    };
    let vocab = corpus.vocabulary()?;
    let path = dir.join(format!("{name}.tsv"));
    let pairs = read_pairs(&path, &vocab).with_context(|| format!("reading {}", path.display()))?;
    ensure!(!pairs.is_empty(), "{} holds no pairs", path.display());
    Ok((vocab, pairs))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_text())
}

fn gen_data(cli: &Cli, out: Option<&Path>) -> Result<()> {
    let cfg = resolve(cli, RunConfig::default(), &["corpus.seed"])?;
    let dir = data_dir(&cfg, out);
    let corpus = generate_corpus(&cfg.corpus)?;
    snapshot(&dir, &cfg)?;
    for (name, pairs) in SPLITS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        write_pairs(&dir.join(format!("{name}.tsv")), &corpus.vocab, pairs)?;
    }
    println!(
        "wrote {} train, {} valid, {} test pairs over {} tokens to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.vocab.len(),
        dir.display()
    );
    Ok(())
}

fn fit_lm(cfg: &RunConfig, vocab: &Vocabulary, train: &[KeywordPair]) -> Result<NGramLM> {
    Ok(NGramLM::train(
        cfg.rl.lm_order,
        cfg.rl.lm_add_k,
        vocab.len(),
        train.iter().map(|p| p.target.as_slice()),
    )?)
}

fn external_lm(cfg: &RunConfig, flag: Option<&Path>, data: &Path, vocab: &Vocabulary) -> Result<NGramLM> {
    match flag {
        Some(path) => NGramLM::load(path, vocab).with_context(|| format!("loading LM {}", path.display())),
        None => fit_lm(cfg, vocab, &read_split(data, cfg, "train")?.1),
    }
}

fn train(cli: &Cli, data: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = resolve(cli, RunConfig::default(), &["model.seed", "train.seed"])?;
    let dir = data_dir(&cfg, data);
    let (vocab, train_pairs) = read_split(&dir, &cfg, "train")?;
    let (_, valid_pairs) = read_split(&dir, &cfg, "valid")?;
    let mut model = Model::new(&cfg.model, dims_for(&cfg)?)?;
    ensure!(
        model.dims.vocab == vocab.len(),
        "data vocabulary does not match the config"
    );

    let build = RunConfig::build_tag();
    let mut steps = format!("# train\t{build}\nstep\tepoch\ttau\tkl\tkl_floored\tdomain\tnll\ttotal\tgrad_norm\n");
    let mut valid = format!("# valid\t{build}\nstep\tkl\tkl_floored\tdomain\tnll\ttotal\n");
    let started = Instant::now();
    let report = train_supervised(&mut model, &train_pairs, &valid_pairs, &cfg.train, &mut |ev| match ev {
        TrainEvent::Step(s) => {
            let l = s.loss;
            let _ = writeln!(
                steps,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.step, s.epoch, s.tau, l.kl, l.kl_floored, l.domain, l.nll, l.total, s.grad_norm
            );
            if s.step % 50 == 0 {
                eprintln!(
                    "step {:>6}  epoch {}  tau {:.3}  loss {:.4}  kl {:.3}  ({:.0}s)",
                    s.step,
                    s.epoch,
                    s.tau,
                    l.total,
                    l.kl,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        TrainEvent::Valid(v) => {
            let l = v.loss;
            let _ = writeln!(
                valid,
                "{}\t{}\t{}\t{}\t{}\t{}",
                v.step, l.kl, l.kl_floored, l.domain, l.nll, l.total
            );
            eprintln!("valid at step {}: loss {:.4}", v.step, l.total);
        }
    })?;

    checkpoint::save(out, &cfg, &model, report.steps.len() as u64, report.final_tau)?;
    write_text(&out.join("train_log.tsv"), &steps)?;
    write_text(&out.join("valid_log.tsv"), &valid)?;
    let init = report.initial_valid();
    println!(
        "{} steps in {:.0}s; validation loss {:.4} -> {:.4} (best at step {}, {:.1}% lower); checkpoint {}",
        report.steps.len(),
        started.elapsed().as_secs_f64(),
        init,
        report.best_valid,
        report.best_step,
        100.0 * (1.0 - report.best_valid / init),
        out.display()
    );
    Ok(())
}

fn train_rl_cmd(cli: &Cli, ck: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let Loaded {
        config: cfg,
        mut model,
        step,
        tau,
    } = load_checkpoint(cli, ck, &["rl.seed"])?;
    let dir = data_dir(&cfg, data);
    let (vocab, train_pairs) = read_split(&dir, &cfg, "train")?;
    let lm = fit_lm(&cfg, &vocab, &train_pairs)?;
    let classifier = OracleClassifier { vocab: &vocab };

    let mut log = format!(
        "# train-rl\t{}\nstep\tepoch\texpected_reward\targmax_reward\tgrad_norm\tskipped\n",
        RunConfig::build_tag()
    );
    let started = Instant::now();
    let report = train_rl(&mut model, &train_pairs, &lm, &classifier, &cfg.rl, &mut |s| {
        let _ = writeln!(
            log,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.step, s.epoch, s.expected_reward, s.argmax_reward, s.grad_norm, s.skipped
        );
        if s.step % 10 == 0 {
            eprintln!(
                "rl step {:>5}  epoch {}  expected reward {:.4}  argmax reward {:.4}  ({:.0}s)",
                s.step,
                s.epoch,
                s.expected_reward,
                s.argmax_reward,
                started.elapsed().as_secs_f64()
            );
        }
    })?;

    checkpoint::save(out, &cfg, &model, step, tau)?;
    lm.save(&out.join(LM_FILE), &vocab)?;
    write_text(&out.join("rl_log.tsv"), &log)?;
    println!(
        "{} policy steps in {:.0}s ({} instances skipped); checkpoint {}",
        report.steps.len(),
        started.elapsed().as_secs_f64(),
        report.skipped,
        out.display()
    );
    Ok(())
}

fn gen_options<'a>(cfg: &RunConfig, betas: &'a [f64], count: usize) -> GenOptions<'a> {
    GenOptions {
        count,
        beam_width: cfg.eval.beam_width,
        fixed_beta: cfg.eval.fixed_beta,
        betas,
        seed: cfg.eval.seed,
    }
}

fn generate_cmd(
    cli: &Cli,
    ck: &Path,
    sources: &Path,
    mode: Mode,
    beta: Option<f64>,
    count: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let Loaded { config: cfg, model, .. } = load_checkpoint(cli, ck, &["eval.seed"])?;
    let vocab = cfg.corpus.vocabulary()?;
    let srcs = read_sources(sources, &vocab).with_context(|| format!("reading {}", sources.display()))?;
    let space = BetaSpace::from_config(&cfg.rl)?;
    let opts = gen_options(&cfg, space.values(), count.unwrap_or(cfg.eval.samples));
    let beta = beta.map_or(BetaSource::Policy, BetaSource::Fixed);

    let mut text = format!(
        "# generate\t{}\t{}\nsource_index\tsource\tkeyword\tdomain\tbeta\tmean_logprob\tkind\n",
        RunConfig::build_tag(),
        mode.as_str()
    );
    for (i, src) in srcs.iter().enumerate() {
        let d_x = oracle_domain(&vocab, src)?;
        for r in generate(&model, src, d_x, i, mode, beta, &opts)? {
            let _ = writeln!(
                text,
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}",
                vocab.decode(src).join(" "),
                vocab.decode(&r.tokens).join(" "),
                r.domain,
                r.beta,
                r.mean_logprob(),
                r.kind.as_str()
            );
        }
    }
    match out {
        Some(path) => {
            write_text(path, &text)?;
            println!("wrote outputs for {} sources to {}", srcs.len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn held_out(cfg: &RunConfig, dir: &Path) -> Result<(Vocabulary, Vec<KeywordPair>, References)> {
    let (vocab, mut test) = read_split(dir, cfg, "test")?;
    let train = read_split(dir, cfg, "train")?.1;
    let valid = read_split(dir, cfg, "valid")?.1;
    let refs = References::build(train.iter().chain(&valid).chain(&test));
    if cfg.eval.max_sources > 0 {
        test.truncate(cfg.eval.max_sources);
    }
    Ok((vocab, test, refs))
}

fn parse_betas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|b| b.trim().parse::<f64>().with_context(|| format!("bad beta {b:?}")))
        .collect()
}

fn sweep_cmd(
    cli: &Cli,
    ck: &Path,
    data: Option<&Path>,
    betas: Option<&str>,
    lm: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let Loaded { config: cfg, model, .. } = load_checkpoint(cli, ck, &["eval.seed"])?;
    ensure!(
        model.variant() == Variant::Latent,
        "sweep-beta needs a latent checkpoint"
    );
    let dir = data_dir(&cfg, data);
    let (vocab, test, refs) = held_out(&cfg, &dir)?;
    let lm = external_lm(&cfg, lm, &dir, &vocab)?;
    let betas = match betas {
        Some(s) => parse_betas(s)?,
        None => cfg.eval.sweep_betas.clone(),
    };
    let classifier = OracleClassifier { vocab: &vocab };
    let rows = sweep_beta(
        &model,
        &test,
        &betas,
        cfg.eval.samples,
        cfg.eval.seed,
        &lm,
        &classifier,
        &refs,
        cfg.rl.lambda,
    )?;
    print!("{}", sweep_table(&rows));
    if let Some(path) = out {
        write_text(path, &sweep_tsv(&rows, &RunConfig::build_tag()))?;
        if let Some(parent) = path.parent() {
            snapshot(parent, &cfg)?;
        }
    }
    Ok(())
}

fn eval_cmd(
    cli: &Cli,
    checkpoints: &[PathBuf],
    modes: &[Mode],
    data: Option<&Path>,
    lm: Option<&Path>,
    out: &Path,
) -> Result<()> {
    ensure!(
        checkpoints.len() == modes.len(),
        "{} checkpoints but {} modes; pass one --mode per --checkpoint",
        checkpoints.len(),
        modes.len()
    );
    let loaded = checkpoints
        .iter()
        .map(|c| load_checkpoint(cli, c, &["eval.seed"]))
        .collect::<Result<Vec<_>>>()?;
    let cfg = loaded[0].config.clone();
    ensure!(
        loaded
            .iter()
            .all(|l| l.config.eval == cfg.eval && l.config.corpus == cfg.corpus),
        "checkpoints disagree on corpus or eval settings; reports would not be comparable"
    );
    let dir = data_dir(&cfg, data);
    let (vocab, test, refs) = held_out(&cfg, &dir)?;
    let lm = external_lm(&cfg, lm, &dir, &vocab)?;
    let classifier = OracleClassifier { vocab: &vocab };
    let space = BetaSpace::from_config(&cfg.rl)?;
    let opts = gen_options(&cfg, space.values(), cfg.eval.samples);

    let mut runs: Vec<(String, Outputs, f64)> = Vec::new();
    for (l, &mode) in loaded.iter().zip(modes) {
        let outputs = generate_all(&l.model, &test, mode, BetaSource::Policy, &opts)?;
        let ppl = model_perplexity(&l.model, &test, mode, BetaSource::Policy, &opts)?;
        let mut title = mode.as_str().to_string();
        if runs.iter().any(|r| r.0 == title) {
            title = format!("{title}-{}", runs.len());
        }
        runs.push((title, outputs, ppl));
    }
    let judged: Vec<_> = runs
        .iter()
        .map(|(_, o, _)| judge(o, &test, &vocab, &classifier))
        .collect();
    let pool = relevant_pool(judged.iter().map(Vec::as_slice));

    snapshot(out, &cfg)?;
    let build = RunConfig::build_tag();
    for ((title, outputs, ppl), j) in runs.iter().zip(&judged) {
        let report = build_report(ReportInputs {
            title: title.clone(),
            outputs,
            perplexity: *ppl,
            sources: test.len(),
            judged: j,
            pool: &pool,
            lm: &lm,
            classifier: &classifier,
            refs: &refs,
            lambda: cfg.rl.lambda,
        })?;
        println!("{}", report.to_table());
        report.save(&out.join(format!("{title}.metrics.tsv")), &build)?;
    }
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, variant: Variant, eps: f64, threshold: f64) -> Result<()> {
    let cfg = resolve(cli, RunConfig::default(), &["model.seed"])?;
    let started = Instant::now();
    let r = miniature_gradcheck(variant, cfg.model.seed, eps)?;
    println!(
        "max relative error {:.3e} at {} over {} entries ({:.1}s)",
        r.max_rel_error,
        r.worst,
        r.entries_checked,
        started.elapsed().as_secs_f64()
    );
    ensure!(
        r.max_rel_error < threshold,
        "max relative error {:.3e} is above the threshold {threshold:e}",
        r.max_rel_error
    );
    Ok(())
}
