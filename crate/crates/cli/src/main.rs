//! `reordernat`: data generation, alignment, distillation, training,
//! translation and evaluation from the command line.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for data, I/O or model
//! errors. Relative paths resolve against `$REORDERNAT_DATA_DIR` when set.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reorder_nat::align::{build_pseudo_translation, ibm1_em_train, viterbi_align};
use reorder_nat::checkpoint::Checkpoint;
use reorder_nat::config::RunConfig;
use reorder_nat::data::vocab::NULL;
use reorder_nat::data::{
    gen_synthetic, read_lines, BatchIter, write_atomic, write_lines, Ambiguity, Corpus, ReorderRule, SyntheticTaskSpec, TextCorpus, TokenMap, Vocab,
};
use reorder_nat::decode::{decode, lpd_decode, sidecar_line, DecodeConfig, DecodeResult, PassCounts, Strategy};
use reorder_nat::eval::{latency_report, render_table, MetricReport};
use reorder_nat::model::{Architecture, ReorderNatParams};
use reorder_nat::train::{distill_corpus, init_ndgd_from_dgd, GuidingMode, TrainStats, Trainer};

const DATA_DIR_VAR: &str = "REORDERNAT_DATA_DIR";

#[derive(Parser)]
#[command(name = "reordernat", version, about = "Non-autoregressive translation with explicit reordering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus with gold pseudo-translations.
    GenData(GenData),
    /// Train IBM Model 1 and write Viterbi links and pseudo-translations.
    Align(Align),
    /// Replace targets by the teacher's beam-search translations.
    Distill(Distill),
    /// Train a model and write a checkpoint plus a tab-separated log.
    Train(TrainCmd),
    /// Translate a source file.
    Translate(Translate),
    /// Score a hypothesis file against references.
    Evaluate(Evaluate),
    /// Render evaluation records as a comparison table.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// Output directory for `train.*` and `test.*` files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value = "swap_halves")]
    rule: ReorderRule,
    /// Reorder rule of the second mode.
    #[arg(long)]
    alt_rule: Option<ReorderRule>,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 5000)]
    pairs: usize,
    #[arg(long, default_value_t = 500)]
    test_pairs: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Use the identity word map instead of a seeded permutation.
    #[arg(long)]
    identity_map: bool,
    /// Number of source types (the first ones) with a second translation.
    #[arg(long, default_value_t = 0)]
    ambiguous_types: usize,
    #[arg(long)]
    distinct: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Align {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Additional parallel data used only to estimate the table.
    #[arg(long, requires = "extra_tgt")]
    extra_src: Option<PathBuf>,
    #[arg(long, requires = "extra_src")]
    extra_tgt: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long)]
    out_align: PathBuf,
    #[arg(long)]
    out_pseudo: PathBuf,
}

#[derive(Args)]
struct Distill {
    #[arg(long)]
    teacher: PathBuf,
    /// Defaults to `<teacher>.vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out_src: PathBuf,
    #[arg(long)]
    out_tgt: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Pseudo-translations (required by the reordering architectures).
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    architecture: Option<Architecture>,
    #[arg(long)]
    mode: Option<GuidingMode>,
    /// DGD checkpoint to initialize NDGD fine-tuning from.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Continue a run from its checkpoint (optimizer state and step).
    #[arg(long, conflicts_with = "init_from")]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Vocabulary file; built from the training files and saved when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also checkpoint every this many steps.
    #[arg(long)]
    save_every: Option<u64>,
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to `<model>.vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// dgd, ndgd, lpd, nat, greedy or beam.
    #[arg(long, default_value = "dgd")]
    strategy: String,
    /// Guidance used by `--strategy lpd`.
    #[arg(long, default_value = "dgd")]
    guide: GuidingMode,
    /// LPD length candidates (odd).
    #[arg(long, default_value_t = 7)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long)]
    temperature: Option<f64>,
    /// Corrupt predicted lengths by ±k.
    #[arg(long, default_value_t = 0)]
    length_noise: usize,
    /// Teacher checkpoint used to re-rank LPD candidates.
    #[arg(long)]
    reranker: Option<PathBuf>,
    /// Side file with pseudo-translations and pass counts.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Baseline hypotheses (normally the teacher) for Dup/Mis increments.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Pass-count side file written by `translate`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long, default_value = "system")]
    system: String,
    /// Write records here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    /// Records written by `evaluate`.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// System whose decoder passes define speedup 1.0.
    #[arg(long)]
    latency_baseline: Option<String>,
}

/// Errors that should exit with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_VAR) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Align(a) => align(a),
        Command::Distill(a) => distill(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_column(dir: &Path, split: &str, ext: &str, rows: &[Vec<String>]) -> Result<()> {
    write_lines(dir.join(format!("{split}.{ext}")), rows)?;
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let dir = resolve(&a.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let spec = SyntheticTaskSpec {
        vocab_size: a.vocab_size,
        min_len: a.min_len,
        max_len: a.max_len,
        pairs: a.pairs + a.test_pairs,
        token_map: if a.identity_map { TokenMap::Identity } else { TokenMap::Permuted },
        rule: a.rule,
        alt_rule: a.alt_rule,
        ambiguity: (a.ambiguous_types > 0).then(|| Ambiguity {
            types: (0..a.ambiguous_types).collect(),
        }),
        distinct: a.distinct,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let syn = gen_synthetic(&spec)?;
    let t = &syn.text;
    let pseudo = t.pseudo.as_ref().expect("generator fills pseudo-translations");
    let links = t.links.as_ref().expect("generator fills alignments");
    for (split, range) in [("train", 0..a.pairs), ("test", a.pairs..a.pairs + a.test_pairs)] {
        if range.is_empty() {
            continue;
        }
        write_column(&dir, split, "src", &t.source[range.clone()])?;
        write_column(&dir, split, "tgt", &t.target[range.clone()])?;
        write_column(&dir, split, "pseudo", &pseudo[range.clone()])?;
        let pharaoh: String = links[range].iter().map(|l| format!("{l}\n")).collect();
        write_text(&dir.join(format!("{split}.align")), &pharaoh)?;
    }
    eprintln!("wrote {} train and {} test pairs to {}", a.pairs, a.test_pairs, dir.display());
    Ok(())
}

fn align(a: Align) -> Result<()> {
    let mut text = TextCorpus::read(resolve(&a.src), resolve(&a.tgt), None, None)?;
    let n = text.len();
    if let (Some(s), Some(t)) = (&a.extra_src, &a.extra_tgt) {
        let extra = TextCorpus::read(resolve(s), resolve(t), None, None)?;
        text.source.extend(extra.source);
        text.target.extend(extra.target);
    }
    let vocab = Vocab::build(text.all_sentences())?;
    let ids: Vec<(Vec<usize>, Vec<usize>)> = text
        .source
        .iter()
        .zip(&text.target)
        .map(|(s, t)| (vocab.encode(s), vocab.encode(t)))
        .collect();
    let trace = ibm1_em_train(&ids, a.iterations)?;
    let (mut pharaoh, mut pseudo) = (String::new(), Vec::with_capacity(n));
    for (s, t) in &ids[..n] {
        let links = viterbi_align(s, t, &trace.table);
        pharaoh.push_str(&format!("{links}\n"));
        let z = build_pseudo_translation(s, &links)?;
        pseudo.push(vocab.decode(&z)?.into_iter().map(str::to_string).collect::<Vec<_>>());
    }
    write_text(&resolve(&a.out_align), &pharaoh)?;
    write_lines(resolve(&a.out_pseudo), &pseudo)?;
    let ll = &trace.log_likelihood;
    eprintln!("log-likelihood {:.3} -> {:.3} over {} iterations", ll[0], ll[ll.len() - 1], a.iterations);
    Ok(())
}

fn load_model(path: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, Vocab)> {
    let path = resolve(path);
    let ckpt = Checkpoint::load(&path)?;
    let vpath = vocab.map(resolve).unwrap_or_else(|| with_suffix(&path, ".vocab"));
    let vocab = Vocab::load(&vpath)?;
    if vocab.len() != ckpt.model.config.vocab_size {
        bail!(
            "{} has {} tokens but the model expects {}",
            vpath.display(),
            vocab.len(),
            ckpt.model.config.vocab_size
        );
    }
    Ok((ckpt, vocab))
}

fn encode_lines(vocab: &Vocab, lines: &[Vec<String>]) -> Vec<Vec<usize>> {
    lines.iter().map(|l| vocab.encode(l)).collect()
}

fn distill(a: Distill) -> Result<()> {
    let (ckpt, vocab) = load_model(&a.teacher, a.vocab.as_deref())?;
    let teacher = ckpt.model;
    if teacher.architecture() != Architecture::Teacher {
        return Err(usage(format!("{} is not a teacher checkpoint", a.teacher.display())));
    }
    let src = read_lines(resolve(&a.src))?;
    let max_len = teacher.config.max_len;
    let examples = encode_lines(&vocab, &src)
        .into_iter()
        .map(|s| reorder_nat::data::SentenceExample::new(s, vec![NULL]))
        .collect();
    let corpus = Corpus::new(examples, max_len)?;
    let d = distill_corpus(&teacher, &corpus, a.beam, max_len)?;
    let render = |ids: &[usize]| -> Result<Vec<String>> { Ok(vocab.decode(ids)?.into_iter().map(str::to_string).collect()) };
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for ex in &d.corpus.examples {
        s.push(render(&ex.source)?);
        t.push(render(&ex.target)?);
    }
    write_lines(resolve(&a.out_src), &s)?;
    write_lines(resolve(&a.out_tgt), &t)?;
    eprintln!("distilled {} sentences, skipped {}", d.corpus.len(), d.skipped);
    Ok(())
}

fn train(a: TrainCmd) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::read(resolve(p)).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(arch) = a.architecture {
        run.model.architecture = arch;
    }
    if let Some(mode) = a.mode {
        run.train.mode = mode;
    }
    if let Some(steps) = a.steps {
        run.train.max_steps = steps;
    }
    run.sync_schedule();

    let out = resolve(&a.out);
    let text = TextCorpus::read(
        resolve(&a.src),
        resolve(&a.tgt),
        a.pseudo.as_deref().map(resolve).as_deref(),
        None,
    )?;
    let source_ckpt = a.init_from.as_ref().or(a.resume.as_ref()).map(|p| resolve(p));
    let vocab_path = a.vocab.as_deref().map(resolve);
    let vocab = match (&vocab_path, &source_ckpt) {
        (Some(p), _) if p.exists() => Vocab::load(p)?,
        (None, Some(ck)) => Vocab::load(with_suffix(ck, ".vocab"))?,
        _ => Vocab::build(text.all_sentences())?,
    };
    if let Some(p) = &vocab_path {
        if !p.exists() {
            vocab.save(p)?;
        }
    }
    vocab.save(with_suffix(&out, ".vocab"))?;

    let mut trainer = if let Some(init) = &a.init_from {
        if run.train.mode != GuidingMode::Ndgd && a.mode.is_some() {
            return Err(usage("--init-from starts NDGD fine-tuning; use --mode ndgd"));
        }
        let ckpt = Checkpoint::load(init)?;
        let fresh = ReorderNatParams::new(ckpt.model.config.clone())?;
        init_ndgd_from_dgd(&ckpt, &fresh, run.train.clone())?
    } else if let Some(resume) = &a.resume {
        let ckpt = Checkpoint::load(resume)?;
        Trainer::resume(ckpt, run.train.clone())?
    } else {
        run.model.vocab_size = vocab.len();
        run.model.validate().map_err(|e| usage(e.to_string()))?;
        Trainer::new(ReorderNatParams::new(run.model.clone())?, run.train.clone())?
    };
    let arch = trainer.model.architecture();
    if arch.reorder_kind().is_some() && text.pseudo.is_none() {
        return Err(usage(format!("{arch} needs --pseudo (see `reordernat align`)")));
    }
    let corpus = text.encode(&vocab, trainer.model.config.max_len)?;

    let log_path = a.log.as_deref().map(resolve).unwrap_or_else(|| with_suffix(&out, ".log"));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", TrainStats::HEADER)?;
    let it = BatchIter::new(corpus.len(), trainer.config.batch_size, trainer.config.seed)?;
    while trainer.step < trainer.config.max_steps {
        let batch = it.batch(&corpus, it.indices_for_step(trainer.step + 1));
        let stats = trainer.joint_step(&batch)?;
        writeln!(log, "{stats}").with_context(|| format!("writing {}", log_path.display()))?;
        if a.save_every.is_some_and(|k| k > 0 && stats.step % k == 0) {
            log.flush()?;
            trainer.checkpoint().save(with_suffix(&out, &format!(".step{}", stats.step)))?;
        }
    }
    log.flush()?;
    trainer.checkpoint().save(&out)?;
    eprintln!("trained {arch} to step {}; wrote {}", trainer.step, out.display());
    Ok(())
}

fn decode_config(a: &Translate, model: &ReorderNatParams) -> Result<(DecodeConfig, bool)> {
    let (strategy, lpd) = match a.strategy.as_str() {
        "lpd" => (
            match a.guide {
                GuidingMode::Dgd => Strategy::Dgd,
                GuidingMode::Ndgd => Strategy::Ndgd,
            },
            true,
        ),
        s => (s.parse::<Strategy>().map_err(|e| usage(e.to_string()))?, false),
    };
    let cfg = DecodeConfig {
        strategy,
        temperature: a.temperature.unwrap_or(model.config.temperature),
        beam_size: a.beam,
        lpd_samples: if lpd { a.samples } else { 1 },
        max_len: model.config.max_len,
        length_noise: a.length_noise,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((cfg, lpd))
}

fn translate(a: Translate) -> Result<()> {
    let (ckpt, vocab) = load_model(&a.model, a.vocab.as_deref())?;
    let model = ckpt.model;
    let (cfg, lpd) = decode_config(&a, &model)?;
    let reranker = match &a.reranker {
        Some(p) => Some(Checkpoint::load(resolve(p))?.model),
        None => None,
    };
    let input = read_lines(resolve(&a.input))?;
    let render = |ids: &[usize]| vocab.decode(ids).map(|w| w.join(" ")).unwrap_or_default();
    let (mut hyps, mut side) = (String::new(), String::new());
    for (i, line) in input.iter().enumerate() {
        let x = vocab.encode(line);
        let r = if x.is_empty() {
            pass_only(PassCounts::default())
        } else if lpd {
            lpd_decode(&model, &x, &cfg, reranker.as_ref()).with_context(|| format!("{} line {}", a.input.display(), i + 1))?
        } else {
            decode(&model, &x, &cfg).with_context(|| format!("{} line {}", a.input.display(), i + 1))?
        };
        hyps.push_str(&render(&r.tokens));
        hyps.push('\n');
        side.push_str(&sidecar_line(&r, render));
        side.push('\n');
    }
    write_text(&resolve(&a.output), &hyps)?;
    if let Some(p) = &a.sidecar {
        write_text(&resolve(p), &side)?;
    }
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<PassCounts> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut total = PassCounts::default();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            bail!("{} line {}: expected 5 tab-separated columns", path.display(), i + 1);
        }
        let n = |k: usize| -> Result<usize> {
            cols[k]
                .parse()
                .with_context(|| format!("{} line {}: bad pass count {:?}", path.display(), i + 1, cols[k]))
        };
        total += PassCounts {
            encoder: n(1)?,
            reorder: n(2)?,
            decoder: n(3)?,
            eos: n(4)?,
        };
    }
    Ok(total)
}

fn evaluate(a: Evaluate) -> Result<()> {
    let hyps = read_lines(resolve(&a.hyp))?;
    let refs = read_lines(resolve(&a.reference))?;
    if hyps.len() != refs.len() {
        bail!("{} has {} lines but {} has {}", a.hyp.display(), hyps.len(), a.reference.display(), refs.len());
    }
    let mut rep = MetricReport::compute(&a.system, &hyps, &refs)?;
    if let Some(b) = &a.baseline {
        let base = read_lines(resolve(b))?;
        if base.len() != refs.len() {
            bail!("baseline {} has {} lines, expected {}", b.display(), base.len(), refs.len());
        }
        rep = rep.with_baseline(&MetricReport::compute("baseline", &base, &refs)?);
    }
    if let Some(s) = &a.sidecar {
        rep.passes = Some(read_sidecar(&resolve(s))?);
    }
    let records = rep.to_records();
    match &a.out {
        Some(p) => write_text(&resolve(p), &records)?,
        None => print!("{records}"),
    }
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.records {
        let p = resolve(p);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        reports.push(MetricReport::from_records(&text).with_context(|| p.display().to_string())?);
    }
    print!("{}", render_table(&reports));
    if let Some(base) = &a.latency_baseline {
        let fake: Vec<(String, Vec<DecodeResult>)> = reports
            .iter()
            .map(|r| {
                let p = r
                    .passes
                    .ok_or_else(|| anyhow::anyhow!("{} has no pass counts (evaluate with --sidecar)", r.system))?;
                Ok((r.system.clone(), vec![pass_only(p)]))
            })
            .collect::<Result<_>>()?;
        let systems: Vec<(&str, &[DecodeResult])> = fake.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
        println!();
        print!("{}", latency_report(&systems, base).map_err(|e| usage(e.to_string()))?);
    }
    Ok(())
}

/// A result carrying only pass totals.
fn pass_only(passes: PassCounts) -> DecodeResult {
    DecodeResult {
        tokens: Vec::new(),
        pseudo: None,
        guidance: None,
        log_probs: Vec::new(),
        score: 0.0,
        passes,
        length: 0,
        truncated: false,
    }
}
