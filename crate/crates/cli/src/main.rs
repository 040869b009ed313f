use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use aggplan::config::RunConfig;
use aggplan::data::{build_vocabs, load_corpus, tokenize, write_corpus, Instance, PredicateVocab};
use aggplan::eval::{align_prf, bleu, kendall_tau, nmi, AlignCounts, SerReport, SlotPatterns};
use aggplan::inference::{generate, generate_with_plan, rank_plans, rule_align, viterbi_align, Alignment, Mode};
use aggplan::model::AggModel;
use aggplan::plan::{format_plan, parse_plan, Plan};
use aggplan::segment::{facts_for, SegmenterConfig};
use aggplan::synth::{synth_corpus, SynthSpec};
use aggplan::training::{pretrain_baseline, train, Prepared};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

/// Data-to-text generation with planning by a latent-state model.
#[derive(Parser, Debug)]
#[command(name = "aggplan", version)]
struct Cli {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build vocabularies from a training corpus and initialize a model directory.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Also write the corpus with its facts filled in.
        #[arg(long)]
        facts_out: Option<PathBuf>,
    },
    /// Train the encoder-decoder as a plain sequence-to-sequence model.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train the latent-state model by marginal likelihood.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Validation corpus; defaults to a held-out tail of the training corpus.
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Plan and realize each input.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Realize this plan (e.g. "[eatType][near customer_rating]") instead of planning.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long)]
        max_group_size: Option<usize>,
    },
    /// Rank candidate plans without decoding text.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        max_group_size: Option<usize>,
    },
    /// Align input triples to the facts of each reference text.
    Align {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = AlignMethod::Viterbi)]
        method: AlignMethod,
        /// Required by the Viterbi aligner.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score system output against references.
    Evaluate {
        #[arg(long, value_enum)]
        metric: Metric,
        /// System output: `generate`, `plan`, or `align` records.
        #[arg(long)]
        hyp: PathBuf,
        /// Reference corpus (bleu, ser) or gold plans, one per line (nmi, tau, align-prf).
        #[arg(long)]
        reference: PathBuf,
        /// Slot pattern file for `ser`; also needs the corpus as `--reference`.
        #[arg(long)]
        patterns: Option<PathBuf>,
    },
    /// Write a synthetic corpus with gold plans and matching slot patterns.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSON generator description; the built-in restaurant domain otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        patterns: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    NoOrdering,
    NoAggregation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlignMethod {
    Viterbi,
    Rule,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Bleu,
    Ser,
    Nmi,
    Tau,
    AlignPrf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seg = match &cfg.segmenter {
        Some(p) => SegmenterConfig::load(p).with_context(|| format!("segmenter config {}", p.display()))?,
        None => SegmenterConfig::default(),
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::Preprocess { corpus, model, facts_out } => {
            let data = corpus_from(&corpus)?;
            let (tokens, predicates) = build_vocabs(&data, cfg.min_freq)?;
            log::info!("{} tokens, {} predicates", tokens.len(), predicates.len() - 1);
            let m = AggModel::new(tokens, predicates, cfg.model(), cfg.seed)?;
            m.save(&model)?;
            if let Some(path) = facts_out {
                let filled: Vec<Instance> = data
                    .iter()
                    .map(|inst| Instance {
                        facts: Some(facts_for(inst, &seg)),
                        ..inst.clone()
                    })
                    .collect();
                write_corpus(&path, &filled)?;
            }
        }
        Command::Pretrain { corpus, model } => {
            let mut m = AggModel::load(&model)?;
            let data = m.prepare_corpus(&corpus_from(&corpus)?, &seg)?;
            let history = pretrain_baseline(&mut m.store, &m.emission, &data, &cfg.pretrain())?;
            m.save(&model)?;
            emit(&mut out, &json!({ "loss_per_token": history }))?;
        }
        Command::Train { corpus, model, dev } => {
            let mut m = AggModel::load(&model)?;
            let mut data = m.prepare_corpus(&corpus_from(&corpus)?, &seg)?;
            let dev_data = match dev {
                Some(p) => m.prepare_corpus(&corpus_from(&p)?, &seg)?,
                None => {
                    let n = (data.len() as f64 * cfg.dev_fraction).floor() as usize;
                    data.split_off(data.len() - n.min(data.len().saturating_sub(1)))
                }
            };
            let tc = cfg.train(Some(model.join("checkpoints")));
            let report = train(&mut m.store, &m.emission, &m.transition, &data, &dev_data, &tc)?;
            m.save(&model)?;
            emit(
                &mut out,
                &json!({
                    "train_loss": report.train_loss,
                    "dev_loss": report.dev_loss,
                    "best_epoch": report.best_epoch,
                }),
            )?;
        }
        Command::Generate {
            model,
            input,
            mode,
            plan,
            max_group_size,
        } => {
            let m = AggModel::load(&model)?;
            let mut gc = cfg.generate();
            if let Some(mode) = mode {
                gc.mode = match mode {
                    ModeArg::Full => Mode::Full,
                    ModeArg::NoOrdering => Mode::NoOrdering,
                    ModeArg::NoAggregation => Mode::NoAggregation,
                };
            }
            if max_group_size.is_some() {
                gc.max_group_size = max_group_size;
            }
            let cap = gc.max_group_size.unwrap_or(m.config.max_group_size);
            let fixed = plan
                .as_deref()
                .map(|p| parse_plan(p, &m.predicates, cap))
                .transpose()?;
            for (i, inst) in corpus_from(&input)?.iter().enumerate() {
                let g = match &fixed {
                    Some(p) => generate_with_plan(&m, &inst.triples, p, gc.beam_width, gc.max_fact_len, cap),
                    None => generate(&m, &inst.triples, &gc),
                }
                .with_context(|| format!("instance {i}"))?;
                emit(
                    &mut out,
                    &json!({
                        "id": i,
                        "plan": format_plan(&g.plan, &m.predicates),
                        "text": g.text,
                        "facts": g.facts,
                        "log_text": g.log_text,
                        "log_plan": g.log_plan,
                        "log_joint": g.log_joint,
                    }),
                )?;
            }
        }
        Command::Plan {
            model,
            input,
            top,
            max_group_size,
        } => {
            let m = AggModel::load(&model)?;
            let mut gc = cfg.generate();
            if max_group_size.is_some() {
                gc.max_group_size = max_group_size;
            }
            for (i, inst) in corpus_from(&input)?.iter().enumerate() {
                let ranked = rank_plans(&m, &inst.triples, &gc).with_context(|| format!("instance {i}"))?;
                let plans: Vec<Value> = ranked
                    .iter()
                    .take(top)
                    .map(|(p, lp)| json!({ "plan": format_plan(p, &m.predicates), "log_prob": lp }))
                    .collect();
                let best = plans.first().map(|p| p["plan"].clone()).unwrap_or(Value::Null);
                emit(&mut out, &json!({ "id": i, "plan": best, "plans": plans }))?;
            }
        }
        Command::Align { input, method, model } => {
            let data = corpus_from(&input)?;
            let m = match (method, model) {
                (AlignMethod::Viterbi, None) => bail!("the Viterbi aligner needs --model"),
                (_, Some(dir)) => Some(AggModel::load(&dir)?),
                (_, None) => None,
            };
            for (i, inst) in data.iter().enumerate() {
                let (alignment, names) = match &m {
                    Some(m) if method == AlignMethod::Viterbi => {
                        let p: Prepared = m.prepare(inst, i, &seg)?;
                        let (a, _, _) = viterbi_align(&m.store, m, &p, cfg.max_group_size)?;
                        (a, m.predicates.clone())
                    }
                    _ => {
                        let names: Vec<&str> = inst.predicates().collect();
                        let vocab = PredicateVocab::from_names(&names)?;
                        let ids = vocab.instance_ids(inst)?;
                        (rule_align(&inst.triples, &ids, &facts_for(inst, &seg)), vocab)
                    }
                };
                let sets: Vec<Vec<String>> = alignment
                    .sets
                    .iter()
                    .map(|s| s.iter().map(|&p| names.plan_name(p)).collect())
                    .collect();
                emit(&mut out, &json!({ "id": i, "alignment": sets }))?;
            }
        }
        Command::Evaluate {
            metric,
            hyp,
            reference,
            patterns,
        } => evaluate(&mut out, metric, &hyp, &reference, patterns.as_deref())?,
        Command::Synth {
            count,
            seed,
            spec,
            corpus,
            plans,
            patterns,
        } => {
            let spec = match spec {
                Some(p) => SynthSpec::load(&p)?,
                None => SynthSpec::default(),
            };
            synth_corpus(&spec, count, seed)?.write(&corpus, &plans, &patterns)?;
            log::info!("wrote {count} instances to {}", corpus.display());
        }
    }
    out.flush()?;
    Ok(())
}

fn corpus_from(path: &Path) -> Result<Vec<Instance>> {
    load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn emit<T: Serialize>(out: &mut impl Write, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    writeln!(out)?;
    Ok(())
}

fn records(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}: record {}", path.display(), i + 1)))
        .collect()
}

fn field<'a>(rec: &'a Value, key: &str, i: usize) -> Result<&'a Value> {
    rec.get(key).with_context(|| format!("record {} has no `{key}`", i + 1))
}

fn text_field(rec: &Value, key: &str, i: usize) -> Result<String> {
    field(rec, key, i)?
        .as_str()
        .map(str::to_string)
        .with_context(|| format!("record {}: `{key}` is not a string", i + 1))
}

fn gold_plans(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Predicate names appearing in plan strings, for a vocabulary that needs no model.
fn plan_vocab<'a>(plans: impl Iterator<Item = &'a str>) -> Result<PredicateVocab> {
    let mut names: Vec<String> = plans
        .flat_map(|p| p.split(|c: char| c == '[' || c == ']' || c.is_whitespace()))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    names.sort_by_key(|n| aggplan::data::predicate_key(n));
    names.dedup_by_key(|n| aggplan::data::predicate_key(n));
    Ok(PredicateVocab::from_names(&names)?)
}

fn check_lengths(hyp: usize, reference: usize) -> Result<()> {
    if hyp != reference {
        bail!("{hyp} system records but {reference} references");
    }
    Ok(())
}

fn evaluate(out: &mut impl Write, metric: Metric, hyp: &Path, reference: &Path, patterns: Option<&Path>) -> Result<()> {
    let recs = records(hyp)?;
    match metric {
        Metric::Bleu => {
            let refs = corpus_from(reference)?;
            check_lengths(recs.len(), refs.len())?;
            let hyps: Vec<Vec<String>> = recs
                .iter()
                .enumerate()
                .map(|(i, r)| text_field(r, "text", i).map(|t| tokenize(&t)))
                .collect::<Result<_>>()?;
            let refs: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![tokenize(&r.text)]).collect();
            emit(out, &json!({ "summary": { "bleu": bleu(&refs, &hyps)? } }))?;
        }
        Metric::Ser => {
            let pats = SlotPatterns::load(patterns.context("`ser` needs --patterns")?)?;
            let refs = corpus_from(reference)?;
            check_lengths(recs.len(), refs.len())?;
            let mut total = SerReport::default();
            for (i, (r, inst)) in recs.iter().zip(&refs).enumerate() {
                let rep = pats.ser(&text_field(r, "text", i)?, &inst.triples)?;
                emit(
                    out,
                    &json!({ "id": i, "add": rep.add, "miss": rep.miss, "wrong": rep.wrong, "total": rep.total, "ser": rep.ser() }),
                )?;
                total.merge(&rep);
            }
            emit(
                out,
                &json!({ "summary": { "add": total.add, "miss": total.miss, "wrong": total.wrong, "total": total.total, "ser": total.ser() } }),
            )?;
        }
        Metric::Nmi | Metric::Tau => {
            let gold = gold_plans(reference)?;
            check_lengths(recs.len(), gold.len())?;
            let sys: Vec<String> = recs
                .iter()
                .enumerate()
                .map(|(i, r)| text_field(r, "plan", i))
                .collect::<Result<_>>()?;
            let vocab = plan_vocab(sys.iter().chain(&gold).map(String::as_str))?;
            let name = if matches!(metric, Metric::Nmi) { "nmi" } else { "tau" };
            let mut sum = 0.0;
            for (i, (s, g)) in sys.iter().zip(&gold).enumerate() {
                let (a, b): (Plan, Plan) = (parse_plan(s, &vocab, usize::MAX)?, parse_plan(g, &vocab, usize::MAX)?);
                let v = if matches!(metric, Metric::Nmi) { nmi(&a, &b)? } else { kendall_tau(&a, &b)? };
                sum += v;
                emit(out, &json!({ "id": i, name: v }))?;
            }
            emit(out, &json!({ "summary": { name: sum / gold.len().max(1) as f64 } }))?;
        }
        Metric::AlignPrf => {
            let gold = gold_plans(reference)?;
            check_lengths(recs.len(), gold.len())?;
            let mut sys_sets = Vec::with_capacity(recs.len());
            for (i, r) in recs.iter().enumerate() {
                let sets: Vec<Vec<String>> = serde_json::from_value(field(r, "alignment", i)?.clone())
                    .with_context(|| format!("record {}: `alignment` must be lists of predicate names", i + 1))?;
                sys_sets.push(sets);
            }
            let vocab = plan_vocab(
                gold.iter()
                    .map(String::as_str)
                    .chain(sys_sets.iter().flatten().flatten().map(String::as_str)),
            )?;
            let to_alignment = |sets: &[Vec<String>]| -> Result<Alignment> {
                let sets = sets
                    .iter()
                    .map(|s| {
                        let mut ids: Vec<usize> = s
                            .iter()
                            .map(|n| vocab.id(n).with_context(|| format!("unknown predicate `{n}`")))
                            .collect::<Result<_>>()?;
                        ids.sort_unstable();
                        Ok(ids)
                    })
                    .collect::<Result<_>>()?;
                Ok(Alignment { sets })
            };
            let mut counts = AlignCounts::default();
            for (i, (s, g)) in sys_sets.iter().zip(&gold).enumerate() {
                let predicted = to_alignment(s)?;
                let g = parse_plan(g, &vocab, usize::MAX)?;
                let gold = Alignment {
                    sets: g
                        .groups
                        .iter()
                        .map(|grp| {
                            let mut v = grp.clone();
                            v.sort_unstable();
                            v
                        })
                        .collect(),
                };
                let (p, r, f) = align_prf(&predicted, &gold);
                counts.add(&AlignCounts::of(&predicted, &gold));
                emit(out, &json!({ "id": i, "precision": p, "recall": r, "f1": f }))?;
            }
            let (p, r, f) = counts.prf();
            emit(out, &json!({ "summary": { "precision": p, "recall": r, "f1": f } }))?;
        }
    }
    Ok(())
}
