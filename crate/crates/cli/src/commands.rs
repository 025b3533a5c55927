use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use codeseek_core::config::Stage;
use codeseek_core::corpus::{build_vocab, load_jsonl};
use codeseek_core::evaluation::{export_embeddings, parse_grid, sweep, write_sweep_csv, SweepParam};
use codeseek_core::index::build_index;
use codeseek_core::training::{finetune, initialize, zero_shot_eval, MetricsSink, Pretrainer};
use codeseek_core::{synthetic, Checkpoint, CodeQueryPair, Corpus, RunConfig, SearchHit, Searcher, Split};
use serde_json::{json, Value};

use crate::args::*;
use crate::manifest::{default_path, RunManifest};
use crate::service::{self, search_response};

/// Resolved global options shared by every subcommand.
pub struct RunContext {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl RunContext {
    fn input(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn run_config(&self, preset: Option<&str>) -> anyhow::Result<RunConfig> {
        let mut overrides = match &self.config {
            Some(path) => load_config_file(&self.input(path))?,
            None => json!({}),
        };
        if let Some(p) = preset {
            overrides["preset"] = Value::from(p);
        }
        let mut cfg = RunConfig::from_overrides(overrides)?;
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
        Ok(cfg)
    }

    fn manifest(
        &self,
        command: &str,
        output: Option<&Path>,
        config: Option<RunConfig>,
        outputs: Vec<PathBuf>,
    ) -> anyhow::Result<Option<RunManifest>> {
        let path = match (&self.manifest, output) {
            (Some(p), _) => p.clone(),
            (None, Some(o)) => default_path(o),
            (None, None) => return Ok(None),
        };
        Ok(Some(RunManifest::begin(path, command, config, self.seed, outputs)?))
    }
}

/// Reads a JSON or TOML config file (chosen by extension) as a JSON value.
pub fn load_config_file(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let t: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            serde_json::to_value(t)?
        }
        _ => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    if !value.is_object() {
        bail!("config {} must be a table/object", path.display());
    }
    Ok(value)
}

fn load_corpus(ctx: &RunContext, path: &Path) -> anyhow::Result<Corpus> {
    let path = ctx.input(path);
    Corpus::load_json(&path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_checkpoint(ctx: &RunContext, path: &Path) -> anyhow::Result<Checkpoint> {
    let path = ctx.input(path);
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn split_of(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Valid => Some(Split::Valid),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

/// Queries of a split together with the pool they are ranked against.
pub fn eval_sets(corpus: &Corpus, split: SplitArg) -> anyhow::Result<(Vec<CodeQueryPair>, Vec<CodeQueryPair>)> {
    let (queries, pool) = match split_of(split) {
        None => (corpus.pairs.clone(), corpus.pairs.clone()),
        Some(Split::Train) => {
            let t = corpus.split_pairs(Split::Train);
            (t.clone(), t)
        }
        Some(s) => {
            let q = corpus.split_pairs(s);
            let pool = if corpus.candidate_pool.is_empty() {
                q.clone()
            } else {
                corpus.pool_pairs()
            };
            (q, pool)
        }
    };
    if queries.is_empty() {
        bail!("split {split:?} has no pairs");
    }
    Ok((queries, pool))
}

fn infer_language(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
    stem.split(['_', '.', '-']).next().unwrap_or(stem).to_owned()
}

fn write_json(out: &mut dyn Write, value: &impl serde::Serialize) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn ingest(ctx: &RunContext, a: IngestArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let seed = ctx.seed.unwrap_or(0);
    let mut skipped = 0;
    let pairs: Vec<CodeQueryPair> = if let Some(n) = a.synthetic {
        if n > synthetic::capacity() {
            bail!("at most {} synthetic pairs are available", synthetic::capacity());
        }
        synthetic::generate(n, seed)
    } else if a.demo {
        synthetic::demo()
    } else {
        let mut all = Vec::new();
        let multi = a.inputs.len() > 1;
        for input in &a.inputs {
            let path = ctx.input(input);
            let language = a.language.clone().unwrap_or_else(|| infer_language(&path));
            let (c, stats) = load_jsonl(&path, &language)?;
            log::info!(
                "{}: {} pairs, {} lines skipped",
                path.display(),
                stats.loaded,
                stats.skipped
            );
            skipped += stats.skipped;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_owned();
            all.extend(c.pairs.into_iter().map(|mut p| {
                if multi {
                    p.id = format!("{stem}/{}", p.id);
                }
                p
            }));
        }
        all
    };
    let manifest = ctx.manifest("ingest", Some(&a.out), None, vec![a.out.clone()])?;
    let mut corpus = Corpus::from_pairs(pairs, Split::Train);
    corpus.resplit(a.valid_frac, a.test_frac, seed)?;
    corpus.validate()?;
    corpus.save_json(&a.out)?;
    write_json(
        out,
        &json!({
            "pairs": corpus.len(),
            "train": corpus.split_pairs(Split::Train).len(),
            "valid": corpus.split_pairs(Split::Valid).len(),
            "test": corpus.split_pairs(Split::Test).len(),
            "pool": corpus.candidate_pool.len(),
            "skipped_lines": skipped,
            "out": a.out,
        }),
    )?;
    finish(manifest)
}

fn finish(manifest: Option<RunManifest>) -> anyhow::Result<()> {
    match manifest {
        Some(m) => m.finish(true),
        None => Ok(()),
    }
}

fn train(ctx: &RunContext, a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(ctx, &a.corpus)?;
    let train_pairs = corpus.split_pairs(Split::Train);
    if train_pairs.is_empty() {
        bail!("the corpus has no train pairs");
    }
    let mut ck = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(ctx, path)?;
            if ck.stage == Stage::Finetune {
                bail!(
                    "{} is a fine-tuned checkpoint; pre-training cannot resume from it",
                    path.display()
                );
            }
            if let Some(seed) = ctx.seed {
                if seed != ck.config.training.seed {
                    log::warn!("--seed is ignored when resuming; the checkpoint carries its own random state");
                }
            }
            ck
        }
        None => {
            let cfg = ctx.run_config(a.preset.as_deref())?;
            let vocab = build_vocab(&train_pairs, cfg.max_vocab)?;
            initialize(cfg, vocab)?
        }
    };
    if let Some(steps) = a.steps {
        ck.config.training.steps = steps;
    }
    if let Some(lr) = a.lr {
        ck.config.training.lr = lr;
    }
    ck.config.validate()?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.metrics_csv.iter().cloned());
    outputs.extend(a.metrics_jsonl.iter().cloned());
    let manifest = ctx.manifest("train", Some(&a.out), Some(ck.config.clone()), outputs)?;

    let total = ck.config.training.steps;
    let (valid, pool) = eval_sets(&corpus, SplitArg::Valid).unwrap_or_default();
    let sink = MetricsSink::to_files(a.metrics_csv.as_deref(), a.metrics_jsonl.as_deref())?;
    let mut trainer = Pretrainer::new(ck, &train_pairs)?.with_metrics(sink);
    if let Some(dir) = &a.checkpoint_dir {
        trainer = trainer.with_checkpoint_dir(dir);
    }
    if let Some(path) = &a.augmentation_trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        trainer = trainer.with_augmentation_trace(Box::new(BufWriter::new(file)));
    }
    if !valid.is_empty() {
        trainer = trainer.with_validation(&valid, &pool);
    }
    trainer.run_until(total)?;
    let last = trainer.trace().last().copied();
    let validation = trainer.validation_log().to_vec();
    let ck = trainer.into_checkpoint();
    ck.save(&a.out)?;
    write_json(
        out,
        &json!({
            "steps": ck.step,
            "final": last,
            "validation_mrr": validation,
            "out": a.out,
            "model_fingerprint": ck.model_fingerprint(),
        }),
    )?;
    finish(manifest)
}

fn finetune_cmd(ctx: &RunContext, a: FinetuneArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(ctx, &a.corpus)?;
    let train_pairs = corpus.split_pairs(Split::Train);
    let mut ck = match &a.checkpoint {
        Some(path) => {
            let mut ck = load_checkpoint(ctx, path)?;
            if let Some(seed) = ctx.seed {
                ck.reseed(seed);
            }
            ck
        }
        None => {
            let cfg = ctx.run_config(a.preset.as_deref())?;
            let vocab = build_vocab(&train_pairs, cfg.max_vocab)?;
            initialize(cfg, vocab)?
        }
    };
    if let Some(e) = a.epochs {
        ck.config.training.epochs = e;
    }
    if let Some(lr) = a.lr {
        ck.config.training.finetune_lr = lr;
    }
    if a.symmetric {
        ck.config.contrastive.symmetric_finetune = true;
    }
    ck.config.validate()?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.metrics_csv.iter().cloned());
    outputs.extend(a.metrics_jsonl.iter().cloned());
    let manifest = ctx.manifest("finetune", Some(&a.out), Some(ck.config.clone()), outputs)?;
    let (valid, pool) = eval_sets(&corpus, SplitArg::Valid)?;
    let mut sink = MetricsSink::to_files(a.metrics_csv.as_deref(), a.metrics_jsonl.as_deref())?;
    let outcome = finetune(ck, &train_pairs, &valid, &pool, Some(&mut sink))?;
    outcome.best.save(&a.out)?;
    write_json(
        out,
        &json!({
            "best_epoch": outcome.best_epoch,
            "history": outcome.history,
            "out": a.out,
            "model_fingerprint": outcome.best.model_fingerprint(),
        }),
    )?;
    finish(manifest)
}

fn eval_cmd(ctx: &RunContext, a: EvalArgs, zero_shot: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = load_checkpoint(ctx, &a.checkpoint)?;
    if zero_shot && ck.stage == Stage::Finetune {
        log::warn!("zero-shot evaluation of a fine-tuned checkpoint");
    }
    let corpus = load_corpus(ctx, &a.corpus)?;
    let manifest = ctx.manifest(
        if zero_shot { "zero-shot" } else { "eval" },
        None,
        Some(ck.config.clone()),
        vec![],
    )?;
    let (queries, pool) = eval_sets(&corpus, a.split)?;
    let mut report = zero_shot_eval(&ck, &queries, &pool)?;
    if !a.ranks {
        report.ranks.clear();
    }
    match a.format {
        ReportFormat::Json => writeln!(out, "{}", report.to_json()?)?,
        ReportFormat::Csv => write!(out, "{}", report.to_csv()?)?,
    }
    finish(manifest)
}

fn apply_sweep_value(cfg: &mut RunConfig, param: SweepParam, value: f64) {
    match param {
        SweepParam::LearningRate => {
            cfg.training.lr = value;
            cfg.training.finetune_lr = value;
        }
        SweepParam::Momentum => cfg.contrastive.momentum = value,
        SweepParam::Ratio => cfg.contrastive.augmentation.ratio = value,
        SweepParam::Temperature => cfg.contrastive.temperature = value,
    }
}

fn sweep_cmd(ctx: &RunContext, a: SweepArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let grid = parse_grid(&a.grid)?;
    let corpus = load_corpus(ctx, &a.corpus)?;
    let mut base = ctx.run_config(a.preset.as_deref())?;
    if let Some(s) = a.steps {
        base.training.steps = s;
    }
    if let Some(e) = a.epochs {
        base.training.epochs = e;
    }
    let manifest = ctx.manifest(
        "sweep",
        a.out.as_deref(),
        Some(base.clone()),
        a.out.iter().cloned().collect(),
    )?;
    let train_pairs = corpus.split_pairs(Split::Train);
    let vocab = build_vocab(&train_pairs, base.max_vocab)?;
    let (queries, pool) = eval_sets(&corpus, a.split)?;
    let valid = eval_sets(&corpus, SplitArg::Valid).ok();
    let rows = sweep(&grid, |param, value| {
        let mut cfg = base.clone();
        apply_sweep_value(&mut cfg, param, value);
        cfg.validate()?;
        log::info!("sweep {}={value}", param.name());
        let ck = initialize(cfg, vocab.clone())?;
        let (mut ck, _) = codeseek_core::training::pretrain(ck, &train_pairs)?;
        if ck.config.training.epochs > 0 {
            if let Some((v, p)) = &valid {
                ck = finetune(ck, &train_pairs, v, p, None)?.best;
            }
        }
        Ok(zero_shot_eval(&ck, &queries, &pool)?.mrr)
    });
    match &a.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_sweep_csv(&rows, f)?;
        }
        None => write_sweep_csv(&rows, &mut *out)?,
    }
    finish(manifest)
}

fn index_cmd(ctx: &RunContext, a: IndexArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = load_checkpoint(ctx, &a.checkpoint)?;
    let corpus = load_corpus(ctx, &a.corpus)?;
    let pairs = match a.split {
        None if !corpus.candidate_pool.is_empty() => corpus.pool_pairs(),
        None | Some(SplitArg::All) => corpus.pairs.clone(),
        Some(s) => corpus.split_pairs(split_of(s).expect("not all")),
    };
    let manifest = ctx.manifest("index", Some(&a.out), Some(ck.config.clone()), vec![a.out.clone()])?;
    let index = build_index(&ck, &pairs)?;
    index.save(&a.out)?;
    write_json(
        out,
        &json!({
            "count": index.len(),
            "dim": index.dim(),
            "model_fingerprint": index.fingerprint(),
            "out": a.out,
        }),
    )?;
    finish(manifest)
}

fn snippet_head(snippet: &str, width: usize) -> String {
    let line = snippet.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    if line.chars().count() <= width {
        line.to_owned()
    } else {
        let cut: String = line.chars().take(width.saturating_sub(3)).collect();
        format!("{cut}...")
    }
}

/// Header line plus one row per hit.
pub fn format_table(hits: &[SearchHit]) -> String {
    let mut s = format!("{:>4}  {:>7}  {:<12}  {}\n", "rank", "score", "id", "snippet");
    for h in hits {
        s.push_str(&format!(
            "{:>4}  {:>7.4}  {:<12}  {}\n",
            h.rank,
            h.score,
            h.id,
            snippet_head(&h.snippet, 72)
        ));
    }
    s
}

/// Prompts on `prompt`, answers on `out`. `:k N` changes k; `:q` or end of input exits.
pub fn repl<R: BufRead, W: Write + ?Sized, P: Write + ?Sized>(
    searcher: &Searcher,
    mut k: usize,
    input: R,
    out: &mut W,
    prompt: &mut P,
) -> anyhow::Result<()> {
    let mut lines = input.lines();
    loop {
        write!(prompt, "query [k={k}]> ")?;
        prompt.flush()?;
        let Some(line) = lines.next() else {
            writeln!(prompt)?;
            return Ok(());
        };
        let line = line?;
        let line = line.trim();
        match line {
            "" => continue,
            ":q" | ":quit" => return Ok(()),
            _ => {}
        }
        if let Some(rest) = line.strip_prefix(":k") {
            match rest.trim().parse::<usize>() {
                Ok(n) if n >= 1 => k = n,
                _ => writeln!(prompt, "usage: :k <positive integer>")?,
            }
            continue;
        }
        match searcher.search(line, k) {
            Ok(hits) => write!(out, "{}", format_table(&hits))?,
            Err(e) => writeln!(prompt, "error: {e}")?,
        }
        out.flush()?;
    }
}

fn search_cmd(ctx: &RunContext, a: SearchArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.k == 0 {
        bail!("k must be at least 1");
    }
    let searcher = Searcher::open(&ctx.input(&a.index), &ctx.input(&a.checkpoint))?;
    let manifest = ctx.manifest("search", None, None, vec![])?;
    if a.interactive {
        let stdin = std::io::stdin();
        repl(&searcher, a.k, stdin.lock(), out, &mut std::io::stderr())?;
    } else {
        let q = a.query.as_deref().unwrap_or_default().trim();
        if q.is_empty() {
            bail!("the query is empty");
        }
        let resp = search_response(&searcher, q, a.k)?;
        match a.format {
            HitFormat::Table => write!(out, "{}", format_table(&resp.hits))?,
            HitFormat::Json => write_json(out, &resp)?,
        }
    }
    finish(manifest)
}

fn serve_cmd(ctx: &RunContext, a: ServeArgs) -> anyhow::Result<()> {
    let searcher =
        Searcher::open(&ctx.input(&a.index), &ctx.input(&a.checkpoint)).context("refusing to start the service")?;
    let manifest = ctx.manifest("serve", None, None, vec![])?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(searcher, a.bind, a.static_dir))?;
    finish(manifest)
}

fn export_cmd(ctx: &RunContext, a: ExportArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = load_checkpoint(ctx, &a.checkpoint)?;
    let corpus = load_corpus(ctx, &a.corpus)?;
    let pairs = match split_of(a.split) {
        None => corpus.pairs.clone(),
        Some(s) => corpus.split_pairs(s),
    };
    let manifest = ctx.manifest(
        "export-embeddings",
        a.out.as_deref(),
        Some(ck.config.clone()),
        a.out.iter().cloned().collect(),
    )?;
    let limits = ck.config.limits;
    match &a.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            export_embeddings(&ck.model, &ck.vocab, limits, &pairs, BufWriter::new(f))?;
        }
        None => export_embeddings(&ck.model, &ck.vocab, limits, &pairs, &mut *out)?,
    }
    finish(manifest)
}

/// Runs one parsed command, writing machine-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let ctx = RunContext {
        seed: cli.seed,
        config: cli.config,
        data_root: cli.data_root,
        manifest: cli.manifest,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a, out),
        Command::Train(a) => train(&ctx, a, out),
        Command::Finetune(a) => finetune_cmd(&ctx, a, out),
        Command::Eval(a) => eval_cmd(&ctx, a, false, out),
        Command::ZeroShot(a) => eval_cmd(&ctx, a, true, out),
        Command::Sweep(a) => sweep_cmd(&ctx, a, out),
        Command::Index(a) => index_cmd(&ctx, a, out),
        Command::Search(a) => search_cmd(&ctx, a, out),
        Command::Serve(a) => serve_cmd(&ctx, a),
        Command::ExportEmbeddings(a) => export_cmd(&ctx, a, out),
    }
}
