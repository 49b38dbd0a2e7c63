use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use coir_core::datasets::{
    from_cirr, from_fashioniq, gen_toy, load_triplets, write_jsonl, write_toy, Manifest, Split, ToyMode,
};
use coir_core::explain::{mask_heatmap, overlay, token_saliency};
use coir_core::image::{encode_ppm, Image};
use coir_core::metrics::{embed_corpus, embed_queries, evaluate};
use coir_core::model::{load_checkpoint, save_checkpoint, CaseModel, QueryMode, Tokenizer, Variant};
use coir_core::redundancy::{rank_map, redundancy_sweep, unimodal_curve, Modality, RedundancyCurve};
use coir_core::retrieval::{load_index, save_index, EmbeddingIndex};
use coir_core::roaming::{dataset_stats, parse_vqa, roam, sample_sheet, CompletionClient, HttpClient, MockClient};
use coir_core::training::{fit, LossVariant, TrainConfig};

use crate::config::{load_config, RunConfig};
use crate::retriever::{build, queries_from_cemb, DataDir, RetrieverSpec};
use crate::*;

fn log_run(name: &str, seed: Option<u64>, cfg: &RunConfig) {
    log::info!(
        "coir {} | {name} | seed {} | config sha256 {}",
        env!("CARGO_PKG_VERSION"),
        seed.map_or("-".to_string(), |s| s.to_string()),
        cfg.hash()
    );
    log::info!("resolved config: {}", serde_json::to_string(cfg).expect("config serializes"));
}

/// Writes `bytes` to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    emit(Some(path), bytes)
}

fn mode(arg: Option<ModeArg>, default: QueryMode) -> QueryMode {
    match arg {
        None => default,
        Some(ModeArg::Standard) => QueryMode::Standard,
        Some(ModeArg::Reverse) => QueryMode::Reverse,
        Some(ModeArg::TextOnly) => QueryMode::TextOnly,
        Some(ModeArg::ImageOnly) => QueryMode::ImageOnly,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.command {
        Command::Train(a) if a.preset == Preset::Toy => RunConfig {
            train: TrainConfig::toy(),
            ..RunConfig::default()
        },
        _ => RunConfig::default(),
    };
    let cfg = load_config(base, cli.config.as_deref())?;
    match cli.command {
        Command::GenToy(a) => gen_toy_cmd(a, cfg),
        Command::Roam(RoamCommand::Run(a)) => roam_run(a, cfg),
        Command::Roam(RoamCommand::Sample(a)) => {
            log_run("roam sample", Some(a.seed), &cfg);
            let t = load_triplets(&a.triplets)?;
            emit(a.out.as_deref(), sample_sheet(&t, a.n, a.seed).as_bytes())
        }
        Command::Stats(a) => stats(a, cfg),
        Command::Convert(a) => convert(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::Embed(a) => embed(a, cfg),
        Command::Retrieve(a) => retrieve(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Redundancy(RedundancyCommand::Curve(a)) => curve(a, cfg),
        Command::Redundancy(RedundancyCommand::Sweep(a)) => sweep(a, cfg),
        Command::Explain(a) => explain(a, cfg),
    }
}

fn gen_toy_cmd(a: GenToyArgs, mut cfg: RunConfig) -> Result<()> {
    let t = &mut cfg.toy;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(m) = a.mode {
        t.mode = match m {
            ToyModeArg::Compositional => ToyMode::Compositional,
            ToyModeArg::Redundant => ToyMode::Redundant,
        };
    }
    if let Some(g) = a.group_size {
        t.group_size = g;
    }
    if let Some(n) = a.train_triplets {
        t.train_triplets = n;
    }
    if let Some(n) = a.val_triplets {
        t.val_triplets = n;
    }
    if let Some(n) = a.val_corpus {
        t.val_corpus = n;
    }
    t.subsets |= a.subsets;
    log_run("gen-toy", Some(cfg.toy.seed), &cfg);
    let data = gen_toy(&cfg.toy)?;
    write_toy(&a.out, &data)?;
    log::info!(
        "wrote {} images, {} train and {} val triplets to {}",
        data.images.len(),
        data.train.len(),
        data.val.len(),
        a.out.display()
    );
    Ok(())
}

fn roam_run(a: RoamRunArgs, mut cfg: RunConfig) -> Result<()> {
    if a.no_symmetry {
        cfg.roam.symmetry = false;
    }
    if let Some(n) = a.min_len {
        cfg.roam.min_len = n;
    }
    if let Some(n) = a.max_len {
        cfg.roam.max_len = n;
    }
    log_run("roam run", None, &cfg);
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let pairs = parse_vqa(&text, &a.input.display().to_string())?;
    let client: Box<dyn CompletionClient> = if let Some(p) = &a.mock {
        let table = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Box::new(MockClient::parse(&table).with_context(|| format!("parsing {}", p.display()))?)
    } else if a.mock_examples {
        Box::new(MockClient::examples())
    } else {
        Box::new(HttpClient::from_env()?)
    };
    let out = roam(&pairs, client.as_ref(), &cfg.roam)?;
    for f in out.failures() {
        log::warn!("pair {} ({:?}) dropped: {}", f.pair, f.direction, f.reasons.join("; "));
    }
    write_jsonl(&a.out, &out.triplets)?;
    if let Some(p) = &a.audit {
        write_jsonl(p, &out.audit)?;
    }
    log::info!("{} pairs -> {} triplets", pairs.len(), out.triplets.len());
    Ok(())
}

fn stats(a: StatsArgs, cfg: RunConfig) -> Result<()> {
    log_run("stats", None, &cfg);
    let mut triplets = Vec::new();
    for p in &a.triplets {
        triplets.extend(load_triplets(p)?);
    }
    let (train, val) = match &a.manifest {
        Some(p) => {
            let m = Manifest::load(p)?;
            (m.ids(Some(Split::Train)).len(), m.ids(Some(Split::Val)).len())
        }
        None => (0, 0),
    };
    let report = dataset_stats(&triplets, train, val);
    if let Some(p) = &a.csv {
        write(p, report.to_csv().as_bytes())?;
    }
    emit(a.out.as_deref(), report.to_json().as_bytes())
}

fn convert(a: ConvertArgs, cfg: RunConfig) -> Result<()> {
    log_run("convert", None, &cfg);
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let origin = a.input.display().to_string();
    let triplets = match a.format {
        ConvertFormat::Cirr => from_cirr(&text, &origin)?,
        ConvertFormat::Fashioniq => from_fashioniq(&text, a.category.as_deref().unwrap_or_default(), &origin)?,
    };
    if a.category.is_some() && matches!(a.format, ConvertFormat::Fashioniq) {
        log::warn!("FashionIQ caption pairs are joined with \" and \"");
    }
    write_jsonl(&a.out, &triplets)?;
    log::info!("{} triplets written to {}", triplets.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, mut cfg: RunConfig) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.schedule.lr0 = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
        cfg.model.init_seed = v;
    }
    if let Some(v) = a.variant {
        cfg.train.variant = match v {
            VariantArg::Full => Variant::Full,
            VariantArg::TextOnly => Variant::TextOnly,
            VariantArg::ImageOnly => Variant::ImageOnly,
        };
    }
    if let Some(l) = a.loss {
        cfg.train.loss.variant = match l {
            LossArg::Surrogate => LossVariant::Surrogate,
            LossArg::Contrastive => LossVariant::Contrastive,
        };
    }
    if a.no_rq {
        cfg.train.rq_enabled = false;
    }
    log_run("train", Some(cfg.train.seed), &cfg);
    let data = DataDir::open(&a.data, SplitArg::Train)?;
    let triplets = data.triplets()?;
    let corpus = data.corpus()?;
    let tokenizer = Tokenizer::from_corpus(triplets.iter().map(|t| t.query_text.as_str()));
    let mut model = CaseModel::new(cfg.model.clone(), tokenizer)?;
    let mut log_lines = Vec::new();
    fit(&mut model, &triplets, &corpus, &cfg.train, |r| {
        log::info!("epoch {} loss {:.4} lr {:.2e} ({} ms)", r.epoch, r.mean_loss, r.lr, r.wall_ms);
        log_lines.push(r.clone());
    })?;
    save_checkpoint(&a.out, &model)?;
    if let Some(p) = &a.log {
        write_jsonl(p, &log_lines)?;
    }
    log::info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn embed(a: EmbedArgs, cfg: RunConfig) -> Result<()> {
    log_run("embed", None, &cfg);
    let model = load_checkpoint(&a.model)?;
    let data = DataDir::open(&a.data, a.split)?;
    let corpus = data.corpus()?;
    let index = match a.kind {
        EmbedKind::Corpus => embed_corpus(&model, &corpus)?,
        EmbedKind::Queries => {
            let triplets = data.triplets()?;
            let qs = embed_queries(&model, &triplets, &corpus, mode(a.mode, cfg.eval.mode))?;
            EmbeddingIndex::build(qs.into_iter().map(|q| (q.qid, q.embedding)).collect())?
        }
    };
    save_index(&index, &a.out)?;
    log::info!("{} embeddings of dim {} written to {}", index.len(), index.dim(), a.out.display());
    Ok(())
}

fn retrieve(a: RetrieveArgs, cfg: RunConfig) -> Result<()> {
    log_run("retrieve", None, &cfg);
    let model = load_checkpoint(&a.model)?;
    let index = load_index(&a.index)?;
    let image = Image::load(&a.image)?;
    let q = model.forward_query(&image, &a.text, mode(a.mode, cfg.eval.mode))?;
    let result = index.top_k(&q, a.k)?;
    let mut out = serde_json::to_string_pretty(&result)?;
    out.push('\n');
    emit(None, out.as_bytes())
}

fn eval(a: EvalArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(k) = a.k {
        cfg.eval.ks = k;
    }
    let m = mode(a.mode, cfg.eval.mode);
    cfg.eval.mode = m;
    log_run("eval", None, &cfg);
    let (queries, index) = if let Some(model) = &a.model {
        let data = DataDir::open(a.data.as_deref().expect("clap enforces --data"), a.split)?;
        let model = load_checkpoint(model)?;
        let corpus = data.corpus()?;
        let triplets = data.triplets()?;
        (embed_queries(&model, &triplets, &corpus, m)?, embed_corpus(&model, &corpus)?)
    } else if let (Some(index), Some(queries), Some(triplets)) = (&a.index, &a.queries, &a.triplets) {
        let triplets = load_triplets(triplets)?;
        (queries_from_cemb(&triplets, &load_index(queries)?)?, load_index(index)?)
    } else {
        bail!("eval needs either --model with --data, or --index, --queries and --triplets");
    };
    let report = evaluate(&queries, &index, &cfg.eval.ks)?;
    if let Some(p) = &a.csv {
        write(p, report.to_csv().as_bytes())?;
    }
    emit(a.out.as_deref(), report.to_json().as_bytes())
}

fn curve(a: CurveArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(k) = a.k_grid {
        cfg.redundancy.k_grid = k;
    }
    log_run("redundancy curve", None, &cfg);
    let data = DataDir::open(&a.data, a.split)?;
    let triplets = data.triplets()?;
    let mut curves = Vec::new();
    for spec in &a.curves {
        let (modality, retriever) = spec
            .split_once('=')
            .with_context(|| format!("--curve {spec:?}: expected MODALITY=RETRIEVER"))?;
        let modality: Modality = serde_json::from_value(serde_json::Value::String(modality.into()))
            .with_context(|| format!("unknown modality {modality:?} (text-only, image-only, reference)"))?;
        let (queries, index) = build(&retriever.parse::<RetrieverSpec>()?, &data, &triplets)?;
        curves.push(unimodal_curve(&queries, &index, &cfg.redundancy.k_grid, modality)?);
    }
    if let Some(p) = &a.csv {
        write(p, RedundancyCurve::to_csv(&curves).as_bytes())?;
    }
    let mut json = serde_json::to_string_pretty(&curves)?;
    json.push('\n');
    emit(a.out.as_deref(), json.as_bytes())
}

fn sweep(a: SweepArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(n) = a.n {
        cfg.redundancy.n_grid = n;
    }
    if let Some(k) = a.k {
        cfg.redundancy.ks = k;
    }
    log_run("redundancy sweep", None, &cfg);
    let data = DataDir::open(&a.data, a.split)?;
    let triplets = data.triplets()?;
    let filter: RetrieverSpec = a.filter.parse()?;
    let method: RetrieverSpec = a.method.as_deref().unwrap_or(&a.filter).parse()?;
    let (fq, fi) = build(&filter, &data, &triplets)?;
    let filter_ranks = rank_map(&fq, &fi)?;
    let method_ranks = if method == filter {
        filter_ranks.clone()
    } else {
        let (mq, mi) = build(&method, &data, &triplets)?;
        rank_map(&mq, &mi)?
    };
    let s = redundancy_sweep(&method_ranks, &filter_ranks, &cfg.redundancy.n_grid, &cfg.redundancy.ks)?;
    if let Some(w) = &s.warning {
        log::warn!("{w}");
    }
    if let Some(p) = &a.csv {
        write(p, s.to_csv().as_bytes())?;
    }
    emit(a.out.as_deref(), s.to_json().as_bytes())
}

fn explain(a: ExplainArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(w) = a.window {
        cfg.explain.window = w;
    }
    if let Some(s) = a.stride {
        cfg.explain.stride = s;
    }
    log_run("explain", None, &cfg);
    let model = load_checkpoint(&a.model)?;
    let image = Image::load(&a.image)?;
    let target = model.encode_target(&Image::load(&a.target)?)?;
    let m = mode(a.mode, cfg.eval.mode);
    let heat = mask_heatmap(&model, &image, &a.text, m, &target, cfg.explain.window, cfg.explain.stride)?;
    if let Some(p) = &a.overlay {
        write(p, &encode_ppm(&overlay(&image, &heat)))?;
    }
    if let Some(p) = &a.saliency {
        let scores = token_saliency(&model, &image, &a.text, m, &target)?;
        let mut json = serde_json::to_string_pretty(&scores)?;
        json.push('\n');
        write(p, json.as_bytes())?;
    }
    let mut json = serde_json::to_string_pretty(&heat)?;
    json.push('\n');
    emit(a.out.as_deref(), json.as_bytes())
}
