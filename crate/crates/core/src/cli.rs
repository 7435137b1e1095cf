//! Command-line front end. Every subcommand writes its primary output to
//! `--out` and a `<out>.provenance.json` record next to it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalsuite::streameval::{gen_streameval, score_streameval, StreamEvalParams};
use crate::evalsuite::{
    bench_csv, bench_decode, cache_size_sweep, sink_ablation, sink_fraction, stream_perplexity, sweep_csv,
    BenchOptions, PolicyFamily, ABLATION_SINKS,
};
use crate::kvcache::{CachePolicy, DEFAULT_SINKS};
use crate::model::{AttnVariant, ModelConfig, PosKind, RESERVED_SINK_SLOTS};
use crate::train::{self, read_corpus, write_corpus, CorpusKind, DecayKind, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "sinkcache", version, about = "Attention-sink streaming experiments on a tiny transformer")]
struct Cli {
    /// Caps internal worker pools; recorded in provenance.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic token corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a corpus file.
    Train(TrainArgs),
    /// Streaming perplexity under one cache policy.
    Ppl(PplArgs),
    /// Perplexity for several sink counts at a fixed cache size.
    AblateSinks(AblateArgs),
    /// Perplexity for several recent-window sizes at a fixed sink count.
    SweepCache(SweepArgs),
    /// Score StreamEval retrieval accuracy.
    Streameval(StreamEvalArgs),
    /// Attention mass on the first token (and sink tokens) per layer.
    AttnStats(AttnStatsArgs),
    /// Per-token decode latency and cache memory per cache size.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint summary and verify its checksum.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
struct SeedArg {
    #[arg(long, env = "SINKCACHE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct GenCorpusArgs {
    #[arg(long, value_enum)]
    kind: CorpusKind,
    #[arg(long)]
    size: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Train window L; also the per-sample sequence length.
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    decay: DecayKind,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, value_enum, default_value = "rope")]
    pos: PosKind,
    #[arg(long, value_enum, default_value = "softmax")]
    attn: AttnVariant,
    /// Learnable sink tokens prepended to every sample.
    #[arg(long, default_value_t = 0)]
    sink_tokens: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug, Serialize)]
struct StreamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus file whose tokens form the evaluation stream.
    #[arg(long)]
    corpus: PathBuf,
    /// Use only the first N tokens of the corpus.
    #[arg(long)]
    tokens: Option<usize>,
    /// Tokens excluded from scoring; defaults to the model's train window.
    #[arg(long)]
    skip: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct PplArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long, value_parser = parse_policy)]
    policy: CachePolicy,
    #[arg(long)]
    out: PathBuf,
    /// Print the final cache contents to stderr.
    #[arg(long)]
    dump_cache: bool,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long)]
    capacity: usize,
    #[arg(long, value_delimiter = ',', default_values_t = ABLATION_SINKS)]
    sinks: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long, default_value_t = DEFAULT_SINKS)]
    sinks: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    recent: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct StreamEvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = parse_policy)]
    policy: CachePolicy,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    /// Lines per query.
    #[arg(long, default_value_t = 10)]
    every: usize,
    /// Answer distance in lines.
    #[arg(long, default_value_t = 20)]
    distance: usize,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AttnStatsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long, default_value_t = 256)]
    sentences: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `sink`, `sink:x`, `window` or `recompute`.
    #[arg(long, value_parser = parse_family)]
    family: PolicyFamily,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    timed_tokens: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    frac: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn parse_policy(s: &str) -> std::result::Result<CachePolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<PolicyFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    command: &'a str,
    args: &'a T,
    argv: Vec<String>,
    threads: usize,
    version: &'static str,
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct Ctx {
    threads: usize,
    argv: Vec<String>,
}

impl Ctx {
    fn provenance<T: Serialize>(&self, command: &str, args: &T, out: &Path) -> Result<()> {
        let p = Provenance {
            command,
            args,
            argv: self.argv.clone(),
            threads: self.threads,
            version: env!("CARGO_PKG_VERSION"),
        };
        std::fs::write(sidecar(out, ".provenance.json"), serde_json::to_vec_pretty(&p)?)?;
        Ok(())
    }
}

fn load_stream(args: &StreamArgs) -> Result<(crate::model::Model, Vec<u32>, usize)> {
    let model = Checkpoint::load(&args.ckpt)?.model()?;
    let (_, mut tokens) = read_corpus(&args.corpus)?;
    if let Some(n) = args.tokens {
        tokens.truncate(n);
    }
    let skip = args.skip.unwrap_or(model.cfg().train_window);
    Ok((model, tokens, skip))
}

fn run(cli: Cli, ctx: &Ctx) -> Result<()> {
    match cli.cmd {
        Cmd::GenCorpus(a) => {
            let tokens = train::make_corpus(a.kind, a.size, a.seed.seed)?;
            write_corpus(&a.out, &tokens, 256 + RESERVED_SINK_SLOTS)?;
            println!("wrote {} {:?} tokens to {}", tokens.len(), a.kind, a.out.display());
            ctx.provenance("gen-corpus", &a, &a.out)
        }
        Cmd::Train(a) => {
            let (vocab, corpus) = read_corpus(&a.corpus)?;
            if a.heads == 0 || a.d_model % a.heads != 0 {
                return Err(Error::Config(format!("d_model {} is not divisible by {} heads", a.d_model, a.heads)));
            }
            let model = ModelConfig {
                n_layers: a.layers,
                n_heads: a.heads,
                d_model: a.d_model,
                d_head: a.d_model / a.heads,
                d_ff: a.d_ff,
                vocab_size: vocab,
                train_window: a.seq_len,
                pos_kind: a.pos,
                attn_variant: a.attn,
                n_sink_tokens: a.sink_tokens,
                seed: a.seed.seed,
                ..Default::default()
            };
            let tc = TrainConfig {
                steps: a.steps,
                batch: a.batch,
                seq_len: a.seq_len,
                lr_peak: a.lr,
                warmup: a.warmup,
                decay: a.decay,
                weight_decay: a.weight_decay,
                grad_clip: a.grad_clip,
                seed: a.seed.seed,
                threads: ctx.threads,
                ..Default::default()
            };
            let (ckpt, curve) = train::train(&model, &tc, &corpus)?;
            ckpt.save(&a.out)?;
            std::fs::write(sidecar(&a.out, ".loss.csv"), curve.to_csv())?;
            println!(
                "trained {} steps, final loss {:.4}, saved {}",
                a.steps,
                curve.last().unwrap_or(f64::NAN),
                a.out.display()
            );
            ctx.provenance("train", &a, &a.out)
        }
        Cmd::Ppl(a) => {
            let (model, tokens, skip) = load_stream(&a.stream)?;
            let report = stream_perplexity(&model, a.policy, &tokens, skip)?;
            std::fs::write(&a.out, report.to_csv())?;
            std::fs::write(sidecar(&a.out, ".json"), serde_json::to_vec_pretty(&report)?)?;
            println!(
                "policy {} perplexity {:.6} over {} tokens",
                report.policy, report.perplexity, report.n_scored
            );
            if a.dump_cache {
                if matches!(a.policy, CachePolicy::SlidingRecompute { .. }) {
                    eprintln!("sliding recomputation keeps no cache between tokens");
                } else {
                    let mut cache = model.new_cache(a.policy)?;
                    let fed = crate::model::prepend_sink_tokens(&tokens, model.cfg());
                    model.prefill(&mut cache, &fed, 1)?;
                    eprint!("{}", cache.dump());
                }
            }
            ctx.provenance("ppl", &a, &a.out)
        }
        Cmd::AblateSinks(a) => {
            let (model, tokens, skip) = load_stream(&a.stream)?;
            let rows = sink_ablation(&model, &a.sinks, a.capacity, &tokens, skip)?;
            let csv = sweep_csv(&rows);
            std::fs::write(&a.out, &csv)?;
            print!("{csv}");
            ctx.provenance("ablate-sinks", &a, &a.out)
        }
        Cmd::SweepCache(a) => {
            let (model, tokens, skip) = load_stream(&a.stream)?;
            let sweep = cache_size_sweep(&model, a.sinks, &a.recent, &tokens, skip)?;
            let csv = sweep_csv(&sweep.rows);
            std::fs::write(&a.out, &csv)?;
            print!("{csv}");
            for &i in &sweep.non_monotone {
                println!(
                    "note: perplexity rose from {:.4} to {:.4} when y grew from {} to {}",
                    sweep.rows[i - 1].ppl,
                    sweep.rows[i].ppl,
                    sweep.rows[i - 1].y,
                    sweep.rows[i].y
                );
            }
            ctx.provenance("sweep-cache", &a, &a.out)
        }
        Cmd::Streameval(a) => {
            let model = Checkpoint::load(&a.ckpt)?.model()?;
            let params = StreamEvalParams {
                n_queries: a.queries,
                lines_per_query: a.every,
                distance: a.distance,
            };
            let mut accs = Vec::with_capacity(a.samples);
            let mut distance = 0;
            for i in 0..a.samples as u64 {
                let sample = gen_streameval(&params, a.seed.seed.wrapping_add(i))?;
                distance = sample.queries.first().map_or(0, |q| q.token_distance);
                accs.push(score_streameval(&model, a.policy, &sample)?);
            }
            let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
            let summary = serde_json::json!({
                "policy": a.policy.to_string(),
                "params": params,
                "token_distance": distance,
                "accuracy": mean,
                "per_sample": accs,
            });
            std::fs::write(&a.out, serde_json::to_vec_pretty(&summary)?)?;
            println!("policy {} accuracy {mean:.4} (answer distance {distance} tokens)", a.policy);
            ctx.provenance("streameval", &a, &a.out)
        }
        Cmd::AttnStats(a) => {
            let model = Checkpoint::load(&a.ckpt)?.model()?;
            let (_, corpus) = read_corpus(&a.corpus)?;
            let profile = sink_fraction(&model, &corpus, a.len, a.sentences, a.seed.seed)?;
            let csv = profile.to_csv();
            std::fs::write(&a.out, &csv)?;
            print!("{csv}");
            ctx.provenance("attn-stats", &a, &a.out)
        }
        Cmd::Bench(a) => {
            let model = Checkpoint::load(&a.ckpt)?.model()?;
            let opts = BenchOptions {
                timed_tokens: a.timed_tokens,
                reps: a.reps,
                seed: a.seed.seed,
                ..Default::default()
            };
            let rows = bench_decode(&model, a.family, &a.sizes, &opts)?;
            let csv = bench_csv(&rows);
            std::fs::write(&a.out, &csv)?;
            print!("{csv}");
            ctx.provenance("bench", &a, &a.out)
        }
        Cmd::Gradcheck(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let cfg = ckpt.config();
            let (_, corpus) = read_corpus(&a.corpus)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed.seed);
            let batch = train::sample_batch(cfg, cfg.train_window, a.batch.max(1), &corpus, &mut rng)?;
            let r = train::grad_check(cfg, &ckpt.weights, &batch, a.frac, a.seed.seed)?;
            let summary = serde_json::json!({
                "max_rel_err": r.max_rel_err,
                "max_abs_err": r.max_abs_err,
                "n_checked": r.n_checked,
                "worst": r.worst,
            });
            std::fs::write(&a.out, serde_json::to_vec_pretty(&summary)?)?;
            println!(
                "checked {} parameters: max relative error {:.3e} (worst {}[{}])",
                r.n_checked, r.max_rel_err, r.worst.0, r.worst.1
            );
            ctx.provenance("gradcheck", &a, &a.out)
        }
        Cmd::Inspect(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            print!("{}", ckpt.summary());
            Ok(())
        }
    }
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code: 0 on success, 1 on a runtime error, 2 on a usage
/// error.
pub fn cmd_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx {
        threads: cli.threads.max(1),
        argv: argv.iter().map(|s| s.to_string_lossy().into_owned()).collect(),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(ctx.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| run(cli, &ctx)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
