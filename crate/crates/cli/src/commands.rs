use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use kgdialog_core::bundle::{ModelBundle, ModelKind, Responder};
use kgdialog_core::codec::{prepare_examples, TextCodec, TurnExample};
use kgdialog_core::corpus::{load_dialogues, save_dialogues, split_counts, DialogueEpisode, KnowledgeBase, Speaker, Split};
use kgdialog_core::generative_dialogue::{
    eval_generative, repeat_last_f1, train_generative, GenerativeConfig, GenerativeModel, KnowledgeSource, Picker, Variant,
};
use kgdialog_core::knowledge_selection::{eval_selector, train_selector, EncoderKind, IrScorer, ModelScorer, RandomScorer, Selector};
use kgdialog_core::metrics::EvalReport;
use kgdialog_core::released::convert_released;
use kgdialog_core::retrieval_dialogue::{
    eval_retrieval, train_retrieval, KnowledgeMode, ModelResponses, RandomResponses, ResponseScorer, RetrievalModel,
};
use kgdialog_core::retriever::{IndexConfig, InvertedIndex};
use kgdialog_core::toy::{TOY_DIALOGUES, TOY_KB};
use kgdialog_core::train::{TrainConfig, TrainLog};
use kgdialog_nn::gradcheck::{check_seq2seq, Seq2SeqExample};
use kgdialog_nn::{ParamStore, TransformerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cli::*;
use crate::service::{self, AppState, ChatSession, ServiceConfig};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(c) => corpus(c),
        Command::Index(c) => index(c),
        Command::Nn(NnCmd::Gradcheck { layers, heads, dim, tolerance }) => gradcheck(layers, heads, dim, tolerance),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Decode(a) => decode(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Validate { kb, dialogues } => {
            let kb = KnowledgeBase::load(&kb)?;
            let eps = load_dialogues(&dialogues, &kb)?;
            let splits: serde_json::Map<String, serde_json::Value> = split_counts(&eps)
                .into_iter()
                .map(|(s, c)| (serde_json::to_value(s).unwrap().as_str().unwrap_or_default().to_string(), json!(c)))
                .collect();
            print_json(&json!({ "documents": kb.stats(), "episodes": eps.len(), "splits": splits }))
        }
        CorpusCmd::Convert { released, kb, split, out } => {
            let kb = KnowledgeBase::load(&kb)?;
            let text = std::fs::read_to_string(&released).with_context(|| format!("reading {}", released.display()))?;
            let (eps, stats) = convert_released(&text, &kb, split.parse()?)?;
            save_dialogues(&out, &eps)?;
            print_json(&stats)
        }
        CorpusCmd::Toy { out_dir } => {
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("toy_kb.jsonl"), TOY_KB)?;
            std::fs::write(out_dir.join("toy_dialogues.json"), TOY_DIALOGUES)?;
            println!("{}", out_dir.display());
            Ok(())
        }
    }
}

fn index(cmd: IndexCmd) -> Result<()> {
    match cmd {
        IndexCmd::Build { kb, out, buckets, ngram } => {
            let kb = KnowledgeBase::load(&kb)?;
            let idx = InvertedIndex::build(&kb, IndexConfig { bucket_count: buckets, ngram_order: ngram })?;
            idx.save(&out)?;
            print_json(&json!({ "documents": idx.doc_count(), "buckets_used": idx.buckets().len(), "out": out }))
        }
        IndexCmd::Query { index, kb, query, k } => {
            let idx = InvertedIndex::load(&index)?;
            let kb = kb.map(|p| KnowledgeBase::load(&p)).transpose()?;
            for (doc, score) in idx.score_documents(&query, k) {
                let title = kb.as_ref().and_then(|kb| kb.get(&doc)).map(|d| d.title.as_str()).unwrap_or("");
                println!("{score:.6}\t{doc}\t{title}");
            }
            Ok(())
        }
    }
}

fn gradcheck(layers: usize, heads: usize, dim: usize, tolerance: f64) -> Result<()> {
    let cfg = TransformerConfig { layers, heads, model_dim: dim, ffn_dim: 2 * dim, max_len: 3, vocab_size: 10, dropout_rate: 0.0, seed: 5 };
    let ex = Seq2SeqExample { source: vec![5, 7, 9], response: vec![8] };
    let start = std::time::Instant::now();
    let report = check_seq2seq(&cfg, &ex, 1e-5, tolerance)?;
    let worst: Vec<_> = report.params.iter().filter(|p| p.failures > 0).map(|p| json!({ "name": p.name, "max_rel_error": p.max_rel_error })).collect();
    print_json(&json!({
        "elements": report.elements,
        "max_rel_error": report.max_rel_error,
        "failures": report.failures,
        "tolerance": tolerance,
        "failing_params": worst,
        "seconds": start.elapsed().as_secs_f64(),
    }))?;
    if !report.passed() {
        bail!("{} elements above tolerance", report.failures);
    }
    Ok(())
}

/// Knowledge base, validated dialogues and the retrieval index.
pub struct Data {
    pub kb: KnowledgeBase,
    pub episodes: Vec<DialogueEpisode>,
    pub index: InvertedIndex,
}

pub fn load_index(kb: &KnowledgeBase, path: Option<&Path>) -> Result<InvertedIndex> {
    Ok(match path {
        Some(p) => InvertedIndex::load(p)?,
        None => InvertedIndex::build(kb, IndexConfig::default())?,
    })
}

pub fn load_data(d: &DataArgs) -> Result<Data> {
    let kb = KnowledgeBase::load(&d.kb)?;
    let episodes = load_dialogues(&d.data, &kb)?;
    let index = load_index(&kb, d.index.as_deref())?;
    if index.doc_count() != kb.len() {
        bail!("index covers {} documents but the knowledge base has {}", index.doc_count(), kb.len());
    }
    Ok(Data { kb, episodes, index })
}

impl Data {
    pub fn examples(&self, codec: &TextCodec, split: Split) -> Result<Vec<TurnExample>> {
        let eps: Vec<DialogueEpisode> = self.episodes.iter().filter(|e| e.split == split).cloned().collect();
        if eps.is_empty() {
            bail!("no episodes in split {split:?}");
        }
        Ok(prepare_examples(codec, &self.index, &self.kb, &eps)?)
    }

    /// Distinct wizard utterances of the training split.
    pub fn train_utterances(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.episodes
            .iter()
            .filter(|e| e.split == Split::Train)
            .flat_map(|e| e.turns.iter())
            .filter(|t| t.speaker == Speaker::Wizard && seen.insert(t.text.clone()))
            .map(|t| t.text.clone())
            .collect()
    }
}

fn model_config(m: &ModelArgs, codec: &TextCodec) -> TransformerConfig {
    TransformerConfig {
        layers: m.layers,
        heads: m.heads,
        model_dim: m.dim,
        ffn_dim: m.ffn,
        max_len: codec.max_len,
        vocab_size: codec.vocab_size(),
        dropout_rate: m.dropout,
        seed: m.model_seed,
    }
}

fn train_config(o: &OptimArgs) -> TrainConfig {
    TrainConfig {
        steps: o.steps,
        batch_size: o.batch,
        lr: o.lr,
        seed: o.seed,
        clip: (o.clip > 0.0).then_some(o.clip),
        target_loss: o.target_loss,
    }
}

fn gen_config(g: &GenArgs, variant: Variant) -> GenerativeConfig {
    GenerativeConfig {
        variant,
        lambda: g.lambda,
        knowledge_dropout: g.kd,
        beam_size: g.beam,
        max_decode_len: g.max_decode_len,
        length_normalize: g.length_normalize,
    }
}

/// The codec of the warm-start or selector bundle if any, else a new one.
fn codec_for(common: &TrainCommon, data: &Data, inherited: Option<&ModelBundle>) -> Result<TextCodec> {
    if let Some(b) = inherited {
        return Ok(b.codec.clone());
    }
    Ok(TextCodec::train(&data.kb, &data.episodes, common.model.merges, common.model.max_len)?)
}

fn warm_start(store: &mut ParamStore, init: Option<&ModelBundle>) -> usize {
    init.map(|b| store.load_matching(&b.params)).unwrap_or(0)
}

fn summary(bundle: &ModelBundle, log: &TrainLog, skipped: usize, warm: usize, out: &Path) -> serde_json::Value {
    json!({
        "kind": bundle.kind.name(),
        "steps": log.losses.len(),
        "final_loss": log.final_loss(),
        "epoch_losses": log.epoch_losses,
        "skipped_turns": skipped,
        "parameters": bundle.params.num_scalars(),
        "warm_started_tables": warm,
        "out": out,
    })
}

fn load_bundle(p: &Path) -> Result<ModelBundle> {
    ModelBundle::load(p).with_context(|| format!("loading bundle {}", p.display()))
}

fn train(cmd: TrainCmd) -> Result<()> {
    let common = match &cmd {
        TrainCmd::Selector { common, .. }
        | TrainCmd::Retrieval { common, .. }
        | TrainCmd::E2e { common, .. }
        | TrainCmd::TwoStage { common, .. } => common.clone(),
    };
    let data = load_data(&common.data)?;
    let init = common.init_from.as_deref().map(load_bundle).transpose()?;
    let tc = train_config(&common.optim);
    let (bundle, log, skipped, warm) = match cmd {
        TrainCmd::Selector { encoder, .. } => {
            let codec = codec_for(&common, &data, init.as_ref())?;
            let cfg = model_config(&common.model, &codec);
            let kind = match encoder {
                EncoderArg::Transformer => EncoderKind::Transformer,
                EncoderArg::Bow => EncoderKind::Bow,
            };
            let mut store = ParamStore::new();
            let sel = Selector::init(&mut store, &cfg, kind)?;
            let warm = warm_start(&mut store, init.as_ref());
            let ex = data.examples(&codec, Split::Train)?;
            let r = train_selector(&sel, &mut store, &ex, &tc)?;
            (ModelBundle::new(ModelKind::Selector { encoder: kind }, codec, cfg, store), r.log, r.skipped, warm)
        }
        TrainCmd::Retrieval { mode, selector, .. } => {
            let mode = match mode {
                ModeArg::Attention => KnowledgeMode::Attention,
                ModeArg::None => KnowledgeMode::None,
                ModeArg::Gold => KnowledgeMode::Gold,
                ModeArg::TwoStage => KnowledgeMode::TwoStage,
            };
            let sel = match (mode, selector) {
                (KnowledgeMode::TwoStage, Some(p)) => Some(load_bundle(&p)?),
                (KnowledgeMode::TwoStage, None) => bail!("two-stage retrieval needs --selector"),
                _ => None,
            };
            let codec = codec_for(&common, &data, sel.as_ref().or(init.as_ref()))?;
            let cfg = model_config(&common.model, &codec);
            let mut store = ParamStore::new();
            let model = RetrievalModel::init(&mut store, &cfg)?;
            let warm = warm_start(&mut store, init.as_ref());
            let ex = data.examples(&codec, Split::Train)?;
            let train_mode = if mode == KnowledgeMode::TwoStage { KnowledgeMode::Gold } else { mode };
            let r = train_retrieval(&model, &mut store, &ex, train_mode, &tc)?;
            let mut b = ModelBundle::new(ModelKind::Retrieval { mode }, codec, cfg, store);
            b.response_pool = Some(data.train_utterances());
            if let Some(s) = sel {
                b = b.with_selector(s)?;
            }
            (b, r.log, r.skipped, warm)
        }
        TrainCmd::E2e { gen, .. } => {
            let codec = codec_for(&common, &data, init.as_ref())?;
            train_gen(&common, &data, codec, gen_config(&gen, Variant::EndToEnd), None, init.as_ref(), &tc)?
        }
        TrainCmd::TwoStage { gen, selector, .. } => {
            let sel = load_bundle(&selector)?;
            if !matches!(sel.kind, ModelKind::Selector { .. }) {
                bail!("--selector must be a selector bundle");
            }
            if let Some(i) = &init {
                if i.codec != sel.codec {
                    bail!("--init-from and --selector bundles use different tokenizers");
                }
            }
            let codec = sel.codec.clone();
            train_gen(&common, &data, codec, gen_config(&gen, Variant::TwoStage), Some(sel), init.as_ref(), &tc)?
        }
    };
    bundle.validate()?;
    bundle.save(&common.out)?;
    print_json(&summary(&bundle, &log, skipped, warm, &common.out))
}

fn train_gen(
    common: &TrainCommon,
    data: &Data,
    codec: TextCodec,
    gc: GenerativeConfig,
    selector: Option<ModelBundle>,
    init: Option<&ModelBundle>,
    tc: &TrainConfig,
) -> Result<(ModelBundle, TrainLog, usize, usize)> {
    gc.validate()?;
    let cfg = model_config(&common.model, &codec);
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg)?;
    let warm = warm_start(&mut store, init);
    let ex = data.examples(&codec, Split::Train)?;
    let r = train_generative(&model, &mut store, &ex, &gc, tc)?;
    tracing::info!(draws = r.dropout_draws, fired = r.dropout_fired, "knowledge dropout");
    let mut b = ModelBundle::new(ModelKind::Generative { config: gc }, codec, cfg, store);
    if let Some(s) = selector {
        b = b.with_selector(s)?;
    }
    Ok((b, r.log, r.skipped, warm))
}

fn finish(report: EvalReport, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)
}

fn plain_codec(data: &Data) -> Result<TextCodec> {
    Ok(TextCodec::train(&data.kb, &data.episodes, 0, 64)?)
}

fn eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Selector { common, bundle, baseline, seed } => {
            let data = load_data(&common.data)?;
            let split: Split = common.split.parse()?;
            let mut report = EvalReport::new(&common.split);
            let e = match (baseline, bundle) {
                (Some(b), _) => {
                    let ex = data.examples(&plain_codec(&data)?, split)?;
                    report.echo("scorer", format!("{b:?}").to_lowercase());
                    match b {
                        SelectorBaseline::Random => {
                            report.echo("seed", seed);
                            eval_selector(&mut RandomScorer::new(seed), &ex)?
                        }
                        SelectorBaseline::Ir => eval_selector(&mut IrScorer, &ex)?,
                    }
                }
                (None, Some(p)) => {
                    let b = load_bundle(&p)?;
                    let ModelKind::Selector { encoder } = b.kind else { bail!("not a selector bundle") };
                    let sel = Selector::bind(&b.params, &b.transformer, encoder)?;
                    let ex = data.examples(&b.codec, split)?;
                    report.echo("bundle", &p);
                    report.echo("encoder", encoder);
                    eval_selector(&mut ModelScorer { selector: &sel, store: &b.params }, &ex)?
                }
                (None, None) => bail!("give --bundle or --baseline"),
            };
            report.push("r@1", e.recall_at_1, e.n);
            report.push("f1", e.f1, e.n);
            report.echo("skipped_turns", e.skipped);
            report.echo("mean_candidates", e.mean_candidates);
            report.echo("f1_compares", "sentence text without title");
            finish(report, common.out.as_deref())
        }
        EvalCmd::Retrieval { common, bundle, random, pool, seed, trials } => {
            let data = load_data(&common.data)?;
            let split: Split = common.split.parse()?;
            let size: usize =
                pool.strip_prefix("seeded").and_then(|n| n.parse().ok()).ok_or_else(|| anyhow!("pool must look like seeded100"))?;
            let utterances = data.train_utterances();
            let mut report = EvalReport::new(&common.split);
            report.echo("pool", &pool);
            report.echo("seed", seed);
            report.echo("trials", trials);
            let b = bundle.as_deref().map(load_bundle).transpose()?;
            let e = if random {
                let ex = data.examples(&plain_codec(&data)?, split)?;
                report.echo("scorer", "random");
                let mut s = RandomResponses(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
                eval_retrieval(&mut s, &ex, &utterances, size, seed, trials)?
            } else {
                let b = b.as_ref().ok_or_else(|| anyhow!("give --bundle or --random"))?;
                let ModelKind::Retrieval { mode } = b.kind else { bail!("not a retrieval bundle") };
                let model = RetrievalModel::bind(&b.params, &b.transformer)?;
                let sel = match &b.selector {
                    Some(s) => match s.kind {
                        ModelKind::Selector { encoder } => Some((Selector::bind(&s.params, &s.transformer, encoder)?, &s.params)),
                        _ => bail!("nested bundle is not a selector"),
                    },
                    None => None,
                };
                let mut ex = data.examples(&b.codec, split)?;
                if mode == KnowledgeMode::Gold {
                    ex.retain(|e| e.gold_index.is_some());
                }
                report.echo("mode", mode);
                let mut s = ModelResponses::new(&model, &b.params, &b.codec, mode, sel.as_ref().map(|(s, p)| (s, *p)));
                eval_retrieval(&mut s as &mut dyn ResponseScorer, &ex, &utterances, size, seed, trials)?
            };
            report.push("r@1", e.recall_at_1, e.n);
            report.push("f1", e.f1, e.n);
            report.echo("r@1_ci95", e.ci95);
            finish(report, common.out.as_deref())
        }
        EvalCmd::Gen { common, bundle, mode, repeat_last } => {
            let data = load_data(&common.data)?;
            let split: Split = common.split.parse()?;
            let mut report = EvalReport::new(&common.split);
            if repeat_last {
                let ex = data.examples(&plain_codec(&data)?, split)?;
                report.push("f1", repeat_last_f1(&ex)?, ex.len());
                report.echo("model", "repeat_last_utterance");
                return finish(report, common.out.as_deref());
            }
            let p = bundle.ok_or_else(|| anyhow!("give --bundle or --repeat-last"))?;
            let b = load_bundle(&p)?;
            let ModelKind::Generative { config } = &b.kind else { bail!("not a generative bundle") };
            let model = GenerativeModel::bind(&b.params, &b.transformer)?;
            let ex = data.examples(&b.codec, split)?;
            let sel = match &b.selector {
                Some(s) => match s.kind {
                    ModelKind::Selector { encoder } => Some(Selector::bind(&s.params, &s.transformer, encoder)?),
                    _ => bail!("nested bundle is not a selector"),
                },
                None => None,
            };
            let mut picker = match (&sel, &b.selector) {
                (Some(s), Some(sb)) => Picker::Selector(s, &sb.params),
                _ => Picker::Own,
            };
            let source = match mode {
                GenMode::Predicted => KnowledgeSource::Predicted,
                GenMode::Gold => KnowledgeSource::Gold,
            };
            let e = eval_generative(&model, &b.params, &b.codec, &ex, source, &mut picker, config, true)?;
            report.push("ppl", e.ppl, e.tokens);
            report.push("f1", e.f1, e.n);
            report.push("knowledge_r@1", e.knowledge_r1, e.n);
            report.echo("mode", source);
            report.echo("ppl_unit", "bpe token, EOS included");
            report.echo("variant", config.variant);
            report.echo("lambda", config.lambda);
            report.echo("knowledge_dropout", config.knowledge_dropout);
            report.echo("beam_size", config.beam_size);
            report.echo("skipped_turns", e.skipped);
            finish(report, common.out.as_deref())
        }
    }
}

fn decode(a: DecodeArgs) -> Result<()> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let index = load_index(&kb, a.index.as_deref())?;
    let responder = Responder::new(load_bundle(&a.bundle)?)?;
    let doc = kb.find_title(&a.topic).ok_or_else(|| anyhow!("unknown topic {:?}", a.topic))?;
    let mut session = ChatSession::new(&doc.title, &doc.doc_id);
    if a.interactive {
        eprintln!("topic: {} (one message per line, end with EOF)", doc.title);
    }
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = service::take_turn(&responder, &index, &kb, &mut session, &line)?;
        if a.interactive {
            println!("wizard: {}\n  [{}]", r.reply, r.selected_knowledge);
        } else {
            println!("{}", serde_json::to_string(&r)?);
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let kb = KnowledgeBase::load(&a.kb)?;
    let index = load_index(&kb, a.index.as_deref())?;
    let responder = Responder::new(load_bundle(&a.bundle)?)?;
    if let Some(d) = &a.transcripts {
        std::fs::create_dir_all(d)?;
    }
    let state = Arc::new(AppState::new(responder, kb, index, ServiceConfig { transcripts: a.transcripts.clone(), seed: a.seed }));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
