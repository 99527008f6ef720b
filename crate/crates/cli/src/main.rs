//! `rakie` command-line front end.
//!
//! Every failure prints one line `error: <CODE>: <message>` on stderr and
//! exits nonzero. Usage errors use the code `E_USAGE` and exit with 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rakie::config::Config;
use rakie::corpus::{build_image_kc, build_text_kc, read_corpus, read_image_features, read_kc, write_kc, KcKind};
use rakie::data::{read_contexts, write_contexts, Channel, Contexts};
use rakie::eval::{marginal_decode_comparison, random_retrieval_ablation, report_jsonl, summary_table};
use rakie::model::{load_artifact, Artifact, MoeBundle, TaskModel};
use rakie::pipeline::{
    as_predictions, evaluate, predict, predict_moe, read_dataset, retrieve_image, retrieve_text, write_predictions,
    Dataset, ImageTable, MoeInputs, Weighting,
};
use rakie::retrieval::RetrievalResult;
use rakie::synth::{generate, SynthConfig};
use rakie::text_index::TextIndex;
use rakie::trainer::{train_moe_files, train_task_model, EpochReport, MoeSplit, Split};
use rakie::vector_index::VectorIndex;
use rakie::{Error, Result};

#[derive(Parser)]
#[command(name = "rakie", version, about = "Retrieval-augmented multimodal entity and relation extraction")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrievalChannel {
    Text,
    Image,
}

impl From<RetrievalChannel> for Channel {
    fn from(c: RetrievalChannel) -> Self {
        match c {
            RetrievalChannel::Text => Channel::Text,
            RetrievalChannel::Image => Channel::Image,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainChannel {
    Text,
    Image,
    None,
}

impl From<TrainChannel> for Channel {
    fn from(c: TrainChannel) -> Self {
        match c {
            TrainChannel::Text => Channel::Text,
            TrainChannel::Image => Channel::Image,
            TrainChannel::None => Channel::None,
        }
    }
}

/// Where the contexts of one channel come from: a contexts file or an index
/// queried in-process.
#[derive(Args, Clone, Default)]
struct ContextArgs {
    /// Contexts file written by `retrieve` or `ablate-random`.
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// Index to query in-process instead of reading a contexts file.
    #[arg(long, conflicts_with = "contexts")]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic corpus, image features and NER splits.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        /// Share of examples whose type is recoverable from text retrieval.
        #[arg(long, default_value_t = 1.0)]
        text_fraction: f64,
        #[arg(long, default_value_t = 16)]
        image_dim: usize,
    },
    /// Builds the text and image knowledge corpora.
    BuildKc {
        #[arg(long)]
        corpus: PathBuf,
        /// Image feature file for the corpus images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        text_out: PathBuf,
        #[arg(long)]
        image_out: PathBuf,
    },
    /// Builds a BM25 index over a text knowledge corpus.
    IndexText {
        #[arg(long)]
        kc: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds an inner-product index over an image knowledge corpus.
    IndexImage {
        #[arg(long)]
        kc: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieves top-k entries for every example of a dataset.
    Retrieve {
        #[arg(long, value_enum)]
        channel: RetrievalChannel,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Example image features, required for the image channel.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a single-channel model; `none` is the no-retrieval baseline.
    Train {
        #[arg(long, value_enum)]
        channel: TrainChannel,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[command(flatten)]
        ctx: ContextArgs,
        #[arg(long)]
        dev_contexts: Option<PathBuf>,
        /// Example image features, for in-process image retrieval.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the gate that mixes a text and an image expert.
    TrainMoe {
        #[arg(long)]
        text_model: PathBuf,
        #[arg(long)]
        image_model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        text_contexts: PathBuf,
        #[arg(long)]
        image_contexts: PathBuf,
        #[arg(long)]
        dev_text_contexts: Option<PathBuf>,
        #[arg(long)]
        dev_image_contexts: Option<PathBuf>,
        /// Example image features read by the gate.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labels a dataset with a task model or a mixture bundle.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ctx: ContextArgs,
        /// Text-expert contexts, for a mixture bundle.
        #[arg(long)]
        text_contexts: Option<PathBuf>,
        /// Image-expert contexts, for a mixture bundle.
        #[arg(long)]
        image_contexts: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Mix a bundle's experts with fixed equal weights instead of the gate.
        #[arg(long)]
        average: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a predictions file against gold; prints a summary table.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// JSON-lines metrics report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes contexts of `k` uniformly random knowledge entries per example.
    AblateRandom {
        #[arg(long)]
        kc: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares Viterbi and marginal decoding of an NER model.
    CompareDecoders {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ctx: ContextArgs,
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_error(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn load_images(path: Option<&Path>) -> Result<Option<ImageTable>> {
    path.map(|p| {
        let (dim, records) = read_image_features(p)?;
        ImageTable::new(dim, records)
    })
    .transpose()
}

fn retrieve(channel: Channel, index: &Path, data: &Dataset, images: Option<&ImageTable>, k: usize) -> Result<Contexts> {
    match channel {
        Channel::Text => Ok(retrieve_text(&TextIndex::load(index)?, data, k)),
        Channel::Image => {
            let images = images.ok_or_else(|| input_error("image retrieval needs --images"))?;
            retrieve_image(&VectorIndex::load(index)?, data, images, k)
        }
        Channel::None => Err(input_error("the none channel has no index")),
    }
}

fn read_channel_contexts(path: &Path, channel: Channel) -> Result<Contexts> {
    let c = read_contexts(path)?;
    if c.channel != channel {
        return Err(input_error(format!(
            "{} holds {} contexts, expected {}",
            path.display(),
            c.channel,
            channel
        )));
    }
    Ok(c)
}

/// Contexts for `data` from a file or from an in-process query.
fn resolve_contexts(
    channel: Channel,
    ctx: &ContextArgs,
    data: &Dataset,
    images: Option<&ImageTable>,
    k: usize,
) -> Result<Option<Vec<RetrievalResult>>> {
    if channel == Channel::None {
        return Ok(None);
    }
    let c = match (&ctx.contexts, &ctx.index) {
        (Some(p), _) => read_channel_contexts(p, channel)?,
        (None, Some(idx)) => retrieve(channel, idx, data, images, k)?,
        (None, None) => return Err(input_error(format!("the {channel} channel needs --contexts or --index"))),
    };
    Ok(Some(c.results))
}

fn print_history(history: &[EpochReport], best: usize) {
    for h in history {
        match h.dev_f1 {
            Some(f) => eprintln!("epoch {} loss {:.6} dev_f1 {:.4}", h.epoch, h.train_loss, f),
            None => eprintln!("epoch {} loss {:.6}", h.epoch, h.train_loss),
        }
    }
    eprintln!("best epoch {best}");
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenSynth {
            out,
            train,
            dev,
            test,
            text_fraction,
            image_dim,
        } => {
            if !(0.0..=1.0).contains(&text_fraction) {
                return Err(input_error("--text-fraction must lie in [0, 1]"));
            }
            let data = generate(&SynthConfig {
                seed: cfg.seed,
                train,
                dev,
                test,
                text_fraction,
                image_dim,
                ..SynthConfig::default()
            });
            data.write_dir(&out)
        }
        Command::BuildKc {
            corpus,
            images,
            text_out,
            image_out,
        } => {
            let docs = read_corpus(&corpus)?;
            let (_, records) = read_image_features(&images)?;
            let text = build_text_kc(&docs)?;
            let image = build_image_kc(&docs, &records)?;
            write_kc(&text_out, KcKind::Text, &text.entries)?;
            write_kc(&image_out, KcKind::Image, &image)?;
            eprintln!(
                "text entries {} (skipped {}), image entries {}",
                text.entries.len(),
                text.skipped,
                image.len()
            );
            Ok(())
        }
        Command::IndexText { kc, out } => {
            let (kind, entries) = read_kc(&kc)?;
            if kind != KcKind::Text {
                return Err(input_error("index-text needs a text knowledge corpus"));
            }
            TextIndex::build(&entries, cfg.bm25())?.save(&out)
        }
        Command::IndexImage { kc, out } => {
            let (kind, entries) = read_kc(&kc)?;
            if kind != KcKind::Image {
                return Err(input_error("index-image needs an image knowledge corpus"));
            }
            VectorIndex::build(&entries, cfg.normalize_vectors)?.save(&out)
        }
        Command::Retrieve {
            channel,
            k,
            index,
            data,
            images,
            out,
        } => {
            let data = read_dataset(&data)?;
            let images = load_images(images.as_deref())?;
            let c = retrieve(channel.into(), &index, &data, images.as_ref(), k.unwrap_or(cfg.k))?;
            write_contexts(&out, &c)
        }
        Command::Train {
            channel,
            train,
            dev,
            ctx,
            dev_contexts,
            images,
            out,
        } => {
            let channel: Channel = channel.into();
            let train = read_dataset(&train)?;
            let dev = dev.map(|p| read_dataset(&p)).transpose()?;
            let images = load_images(images.as_deref())?;
            let train_ctx = resolve_contexts(channel, &ctx, &train, images.as_ref(), cfg.k)?;
            let dev_ctx = match &dev {
                Some(d) => {
                    let dctx = ContextArgs {
                        contexts: dev_contexts,
                        index: ctx.index.clone(),
                    };
                    resolve_contexts(channel, &dctx, d, images.as_ref(), cfg.k)?
                }
                None => None,
            };
            let outcome = train_task_model(
                Split {
                    data: &train,
                    contexts: train_ctx.as_deref(),
                },
                dev.as_ref().map(|d| Split {
                    data: d,
                    contexts: dev_ctx.as_deref(),
                }),
                channel,
                &cfg,
            )?;
            print_history(&outcome.history, outcome.best_epoch);
            outcome.model.save(&out)
        }
        Command::TrainMoe {
            text_model,
            image_model,
            train,
            dev,
            text_contexts,
            image_contexts,
            dev_text_contexts,
            dev_image_contexts,
            images,
            out,
        } => {
            let train = read_dataset(&train)?;
            let images = load_images(Some(&images))?.expect("path given");
            let tc = read_channel_contexts(&text_contexts, Channel::Text)?.results;
            let ic = read_channel_contexts(&image_contexts, Channel::Image)?.results;
            let dev = dev.map(|p| read_dataset(&p)).transpose()?;
            let dev_ctx = match &dev {
                Some(_) => {
                    let (Some(dt), Some(di)) = (dev_text_contexts, dev_image_contexts) else {
                        return Err(input_error("--dev needs --dev-text-contexts and --dev-image-contexts"));
                    };
                    Some((
                        read_channel_contexts(&dt, Channel::Text)?.results,
                        read_channel_contexts(&di, Channel::Image)?.results,
                    ))
                }
                None => None,
            };
            let train_split = MoeSplit {
                data: &train,
                text_contexts: Some(&tc),
                image_contexts: Some(&ic),
                images: &images,
            };
            let dev_split = dev.as_ref().zip(dev_ctx.as_ref()).map(|(d, (dt, di))| MoeSplit {
                data: d,
                text_contexts: Some(dt),
                image_contexts: Some(di),
                images: &images,
            });
            let (bundle, outcome) = train_moe_files(&text_model, &image_model, train_split, dev_split, &cfg)?;
            print_history(&outcome.history, outcome.best_epoch);
            if outcome.floored > 0 {
                eprintln!("floored examples {}", outcome.floored);
            }
            bundle.save(&out)
        }
        Command::Predict {
            model,
            data,
            ctx,
            text_contexts,
            image_contexts,
            images,
            average,
            out,
        } => {
            let data = read_dataset(&data)?;
            let images = load_images(images.as_deref())?;
            let pred = match load_artifact(&model)? {
                Artifact::Task(m) => {
                    if average {
                        return Err(input_error("--average applies to mixture bundles only"));
                    }
                    let c = resolve_contexts(m.channel, &ctx, &data, images.as_ref(), m.k)?;
                    predict(&m, &data, c.as_deref())?
                }
                Artifact::Bundle(b) => {
                    let (Some(tc), Some(ic)) = (text_contexts, image_contexts) else {
                        return Err(input_error("a mixture bundle needs --text-contexts and --image-contexts"));
                    };
                    predict_bundle(&b, &model, &data, &tc, &ic, images.as_ref(), average)?
                }
            };
            write_predictions(&out, &data, &pred)
        }
        Command::Evaluate { pred, gold, out } => {
            let pred = read_dataset(&pred)?;
            let gold = read_dataset(&gold)?;
            let records = evaluate(&as_predictions(&pred), &gold, &cfg.none_label)?;
            if let Some(out) = out {
                std::fs::write(&out, report_jsonl(&records)).map_err(|e| Error::io(&out, e))?;
            }
            print!("{}", summary_table(&records));
            Ok(())
        }
        Command::AblateRandom { kc, data, k, out } => {
            let (kind, entries) = read_kc(&kc)?;
            let data = read_dataset(&data)?;
            let k = k.unwrap_or(cfg.k);
            let channel = match kind {
                KcKind::Text => Channel::Text,
                KcKind::Image => Channel::Image,
            };
            let results = random_retrieval_ablation(data.len(), &entries, k, cfg.seed);
            write_contexts(&out, &Contexts { channel, k, results })
        }
        Command::CompareDecoders {
            model,
            data,
            ctx,
            images,
        } => {
            let m = TaskModel::load(&model)?;
            let data = read_dataset(&data)?;
            let images = load_images(images.as_deref())?;
            let c = resolve_contexts(m.channel, &ctx, &data, images.as_ref(), m.k)?;
            let gold = data.ner()?;
            let mut potentials = Vec::with_capacity(gold.len());
            for (i, s) in gold.iter().enumerate() {
                let input = m.augment(&s.tokens, c.as_ref().and_then(|c| c.get(i)))?;
                potentials.push(m.ner_potentials(&input)?);
            }
            let tags: Vec<Vec<String>> = gold.iter().map(|s| s.tags.clone()).collect();
            let cmp = marginal_decode_comparison(&potentials, &tags, &m.labels)?;
            println!(
                "viterbi_f1 {:.4}\nmarginal_f1 {:.4}\nagreement {:.6}\ntokens {}",
                cmp.viterbi.f1_percent(),
                cmp.marginal.f1_percent(),
                cmp.agreement,
                cmp.tokens
            );
            Ok(())
        }
    }
}

fn predict_bundle(
    bundle: &MoeBundle,
    bundle_path: &Path,
    data: &Dataset,
    text_contexts: &Path,
    image_contexts: &Path,
    images: Option<&ImageTable>,
    average: bool,
) -> Result<rakie::pipeline::Predictions> {
    let (text_model, image_model) = bundle.load_experts(bundle_path.parent())?;
    let tc = read_channel_contexts(text_contexts, Channel::Text)?.results;
    let ic = read_channel_contexts(image_contexts, Channel::Image)?.results;
    let inputs = MoeInputs {
        text_model: &text_model,
        image_model: &image_model,
        text_contexts: Some(&tc),
        image_contexts: Some(&ic),
    };
    let weighting = if average {
        Weighting::Fixed(0.5)
    } else {
        let images = images.ok_or_else(|| input_error("the gate needs --images"))?;
        Weighting::Gate(&bundle.gate, images)
    };
    predict_moe(&inputs, data, weighting)
}
