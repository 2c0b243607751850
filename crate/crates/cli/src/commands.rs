use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eas_core::engine::{DType, Scalar};
use eas_core::headid::{
    eas_csv, etiology_aware_scores, jaccard_matrix, normalize_for_display, parse_eas_csv, select_heads, top_k_heads,
    EasMatrix, HeadSelection,
};
use eas_core::metrics::{diagnose, DiagnoseMode, DiagnosisResult, EvalRecord, MetricsReport};
use eas_core::model::{peek_checkpoint, ModelConfig, Transformer};
use eas_core::rgtrain::{build_examples, pretrain, train_rg, Ablation, PretrainConfig, RGConfig};
use eas_core::synthcorpus::{
    annotate, generate_corpus, parse_jsonl, split_folds, to_jsonl_line, AnnotatedRecord, Difficulty, RawRecord,
    ScaffoldSpec, Stage,
};
use eas_core::tokenizer::{build_vocab, decode, encode, Vocabulary};
use eas_core::metrics::wilcoxon_one_sided;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::svg::{matrix_heatmap, ranked_heatmap};
use crate::{Cli, Command, EvaluateArgs, GenCorpusArgs, IdentifyArgs, ReportArgs, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", describe(.0))]
    Core(#[from] eas_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data consistency error: {0}")]
    Data(String),
}

fn describe(e: &eas_core::Error) -> String {
    match e {
        eas_core::Error::Io { .. } | eas_core::Error::Json(_) => format!("config error: {e}"),
        _ => e.to_string(),
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use eas_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Io { .. } | E::Json(_) => 2,
                E::Numeric(_) => 4,
                _ => 3,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory, input hashes and output list of one command.
struct Run {
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    start: Instant,
}

impl Run {
    fn new(cli: &Cli) -> Result<Self> {
        let out = std::env::var_os("EAS_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| cli.out.clone());
        fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self {
            out,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).map_err(eas_core::Error::from)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(mut self, name: &str, command: &str, config: Value, seed: Option<u64>, threads: usize) -> Result<()> {
        let manifest = json!({
            "command": command,
            "config": config,
            "input_hashes": self.inputs,
            "seed": seed,
            "threads": threads,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "duration_secs": self.start.elapsed().as_secs_f64(),
            "outputs": self.outputs,
        });
        let outputs = std::mem::take(&mut self.outputs);
        self.write_json(name, &manifest)?;
        self.outputs = outputs;
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&cli, a),
        Command::IdentifyHeads(a) => identify(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Report(a) => report(&cli, a),
    }
}

fn gen_corpus(cli: &Cli, a: &GenCorpusArgs) -> Result<()> {
    let mut run = Run::new(cli)?;
    let spec = match &a.scaffold {
        Some(p) => ScaffoldSpec::from_json(&run.read_text(p)?)?,
        None => ScaffoldSpec::default_spec(),
    };
    let mode: Difficulty = a.mode.parse()?;
    let seed = cli.seed.unwrap_or(0);
    let raw = generate_corpus(&spec, a.n, seed, mode)?;
    let mut text = String::new();
    for r in &raw {
        text.push_str(&to_jsonl_line(&annotate(r)?)?);
        text.push('\n');
    }
    run.write(&format!("{}.jsonl", a.name), text.as_bytes())?;
    let config = json!({
        "scaffold": a.scaffold.as_ref().map(|p| p.display().to_string()),
        "n_per_disease": a.n,
        "mode": a.mode,
        "seed": seed,
        "records": raw.len(),
    });
    run.finish(&format!("{}.manifest.json", a.name), "gen-corpus", config, Some(seed), cli.threads)
}

fn read_corpus(run: &mut Run, path: &Path) -> Result<Vec<AnnotatedRecord>> {
    let text = run.read_text(path)?;
    let records = parse_jsonl(&text)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no records", path.display())));
    }
    Ok(records)
}

fn vocab_path(explicit: &Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(|p| p.join("vocab.json"))
            .unwrap_or_else(|| PathBuf::from("vocab.json"))
    })
}

fn read_vocab(run: &mut Run, path: &Path) -> Result<Vocabulary> {
    let text = run.read_text(path)?;
    let tokens: Vec<String> = serde_json::from_str(&text).map_err(eas_core::Error::from)?;
    Ok(Vocabulary::from_tokens(tokens)?)
}

fn load_model<T: Scalar>(run: &mut Run, path: &Path, vocab: &Vocabulary) -> Result<Transformer<T>> {
    let bytes = run.read(path)?;
    Ok(Transformer::<T>::from_checkpoint_bytes(&bytes, Some(&vocab.hash()))?)
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    Ok(peek_checkpoint(path)?.config.dtype)
}

/// Up to `limit` records taken round-robin across labels in corpus order.
fn balanced_subset(records: &[AnnotatedRecord], limit: usize) -> Vec<&AnnotatedRecord> {
    let mut by_label: BTreeMap<&str, Vec<&AnnotatedRecord>> = BTreeMap::new();
    for r in records {
        by_label.entry(r.base.label.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < limit {
        let mut any = false;
        for v in by_label.values() {
            if let Some(r) = v.get(i) {
                if out.len() < limit {
                    out.push(*r);
                }
                any = true;
            }
        }
        if !any {
            break;
        }
        i += 1;
    }
    out
}

fn identify(cli: &Cli, a: &IdentifyArgs) -> Result<()> {
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => identify_typed::<f32>(cli, a),
        DType::F64 => identify_typed::<f64>(cli, a),
    }
}

fn identify_typed<T: Scalar>(cli: &Cli, a: &IdentifyArgs) -> Result<()> {
    let mut run = Run::new(cli)?;
    let vocab = read_vocab(&mut run, &vocab_path(&a.vocab, &a.checkpoint))?;
    let model = load_model::<T>(&mut run, &a.checkpoint, &vocab)?;
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let subset = balanced_subset(&corpus, a.limit);
    let encoded = subset.iter().map(|r| encode(r, &vocab)).collect::<eas_core::Result<Vec<_>>>()?;
    let eas = etiology_aware_scores(&model, &encoded, &vocab, a.max_new, &a.name)?;
    let heads = select_heads(&eas, a.per_stage)?;
    run.write("eas.csv", eas_csv(&eas).as_bytes())?;
    run.write_json("heads.json", &heads)?;
    for stage in Stage::ALL {
        let svg = stage_heatmap(&eas, stage);
        run.write(&format!("heatmap_{}.svg", stage.name()), svg.as_bytes())?;
    }
    let config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "corpus": a.corpus.display().to_string(),
        "limit": a.limit,
        "scored": encoded.len(),
        "max_new": a.max_new,
        "per_stage": a.per_stage,
        "name": a.name,
    });
    run.finish("identify-heads.manifest.json", "identify-heads", config, cli.seed, cli.threads)
}

fn stage_heatmap(eas: &EasMatrix, stage: Stage) -> String {
    let disp = normalize_for_display(eas, stage);
    let mut rows = Vec::new();
    for l in 0..eas.n_layers() {
        for h in 0..eas.n_heads() {
            rows.push((format!("{l}-{h}"), disp[[l, h]], eas.scores[[stage.index(), l, h]]));
        }
    }
    ranked_heatmap(&format!("{} / {}", eas.dataset, stage.name()), &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelShape {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
    max_seq_len: usize,
    dtype: DType,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(2);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
            dtype: d.dtype,
        }
    }
}

fn default_folds() -> usize {
    5
}

fn default_min_count() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    phase: Phase,
    corpus: PathBuf,
    #[serde(default)]
    model: ModelShape,
    #[serde(default)]
    model_seed: u64,
    #[serde(default = "default_min_count")]
    min_count: usize,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default)]
    base: Option<PathBuf>,
    #[serde(default)]
    vocab: Option<PathBuf>,
    #[serde(default)]
    heads: Option<PathBuf>,
    #[serde(default)]
    rg: RGConfig,
    #[serde(default = "default_folds")]
    folds: usize,
    #[serde(default)]
    fold_seed: u64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Config("train needs --config".into()))?;
    let mut run = Run::new(cli)?;
    let text = run.read_text(&config_path)?;
    let mut cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.corpus = resolve(&dir, &cfg.corpus);
    cfg.base = cfg.base.map(|p| resolve(&dir, &p));
    cfg.vocab = cfg.vocab.map(|p| resolve(&dir, &p));
    cfg.heads = cfg.heads.map(|p| resolve(&dir, &p));
    if let Some(ab) = &a.ablation {
        cfg.rg.ablation = ab.parse::<Ablation>()?;
    }
    if let Some(seed) = cli.seed {
        cfg.rg.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.model_seed = seed;
    }
    let dtype = match cfg.phase {
        Phase::Pretrain => cfg.model.dtype,
        Phase::Finetune => {
            let base = a
                .resume
                .clone()
                .or_else(|| cfg.base.clone())
                .ok_or_else(|| CliError::Config("fine-tuning needs a base checkpoint".into()))?;
            checkpoint_dtype(&base)?
        }
    };
    match dtype {
        DType::F32 => train_typed::<f32>(cli, a, cfg, run),
        DType::F64 => train_typed::<f64>(cli, a, cfg, run),
    }
}

fn train_split(records: Vec<AnnotatedRecord>, cfg: &TrainConfig, fold: Option<usize>) -> Result<Vec<AnnotatedRecord>> {
    let Some(fold) = fold else { return Ok(records) };
    if fold >= cfg.folds {
        return Err(CliError::Config(format!("fold {fold} outside {} folds", cfg.folds)));
    }
    let raws: Vec<RawRecord> = records.iter().map(|r| r.base.clone()).collect();
    let assignment = split_folds(&raws, cfg.folds, cfg.fold_seed)?;
    let (train, _) = assignment.split(&records, fold, |r| &r.base.id);
    Ok(train.into_iter().cloned().collect())
}

fn train_typed<T: Scalar>(cli: &Cli, a: &TrainArgs, cfg: TrainConfig, mut run: Run) -> Result<()> {
    let corpus = read_corpus(&mut run, &cfg.corpus)?;
    let records = train_split(corpus, &cfg, a.fold)?;
    let mut extra = json!({});
    let log_lines: Vec<String> = match cfg.phase {
        Phase::Pretrain => {
            let vocab = match &cfg.vocab {
                Some(p) => read_vocab(&mut run, p)?,
                None => build_vocab(&records, cfg.min_count)?,
            };
            let mut model = match &a.resume {
                Some(p) => load_model::<T>(&mut run, p, &vocab)?,
                None => {
                    let m = &cfg.model;
                    let mc = ModelConfig {
                        n_layers: m.n_layers,
                        n_heads: m.n_heads,
                        d_model: m.d_model,
                        d_ff: m.d_ff,
                        vocab_size: vocab.len(),
                        max_seq_len: m.max_seq_len,
                        dtype: m.dtype,
                    };
                    Transformer::<T>::new(mc, vocab.hash(), cfg.model_seed)?
                }
            };
            let logs = pretrain(&mut model, &records, &vocab, &cfg.pretrain)?;
            run.write("vocab.json", &serde_json::to_vec(vocab.tokens()).map_err(eas_core::Error::from)?)?;
            run.write("model.ckpt", &model.checkpoint_bytes()?)?;
            extra["vocab_size"] = json!(vocab.len());
            extra["final_step"] = json!(model.step);
            logs.iter()
                .map(|l| serde_json::to_string(l).map_err(eas_core::Error::from))
                .collect::<eas_core::Result<_>>()?
        }
        Phase::Finetune => {
            let base = cfg
                .base
                .clone()
                .ok_or_else(|| CliError::Config("fine-tuning needs a base checkpoint".into()))?;
            let vocab = read_vocab(&mut run, &vocab_path(&cfg.vocab, &base))?;
            let mut model = match &a.resume {
                Some(p) => load_model::<T>(&mut run, p, &vocab)?,
                None => {
                    let mut m = load_model::<T>(&mut run, &base, &vocab)?;
                    m.step = 0;
                    m
                }
            };
            let mut rg = cfg.rg.clone();
            if let Some(p) = &cfg.heads {
                let text = run.read_text(p)?;
                rg.heads = Some(serde_json::from_str(&text).map_err(eas_core::Error::from)?);
            }
            let examples = build_examples(&records, &vocab, rg.ablation.annotated())?;
            info!("fine-tuning on {} examples ({})", examples.len(), rg.ablation.name());
            let logs = train_rg(&mut model, &rg, &examples)?;
            run.write("model.ckpt", &model.checkpoint_bytes()?)?;
            extra["effective_lambda"] = json!(rg.effective_lambda());
            extra["ablation"] = json!(rg.ablation.name());
            extra["resolved_heads"] = serde_json::to_value(rg.resolved_heads(model.config.n_layers, model.config.n_heads))
                .map_err(eas_core::Error::from)?;
            extra["final_step"] = json!(model.step);
            logs.iter()
                .map(|l| serde_json::to_string(l).map_err(eas_core::Error::from))
                .collect::<eas_core::Result<_>>()?
        }
    };
    let mut log_text = log_lines.join("\n");
    log_text.push('\n');
    run.write("train_log.jsonl", log_text.as_bytes())?;
    let ckpt_hash = sha256_hex(&fs::read(run.out.join("model.ckpt")).map_err(|e| CliError::Config(e.to_string()))?);
    let config = json!({
        "train": cfg,
        "fold": a.fold,
        "resume": a.resume.as_ref().map(|p| p.display().to_string()),
        "records": records.len(),
        "checkpoint_sha256": ckpt_hash,
        "run": extra,
    });
    run.finish("train.manifest.json", "train", config, cli.seed, cli.threads)
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => evaluate_typed::<f32>(cli, a),
        DType::F64 => evaluate_typed::<f64>(cli, a),
    }
}

fn diagnose_all<T: Scalar>(
    model: &Transformer<T>,
    records: &[&AnnotatedRecord],
    labels: &[String],
    vocab: &Vocabulary,
    mode: DiagnoseMode,
    annotated: bool,
) -> Result<Vec<DiagnosisResult>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let ev = EvalRecord::from_record(r, vocab, annotated)?;
        out.push(diagnose(model, &ev, labels, vocab, mode)?);
    }
    Ok(out)
}

fn raf_csv(report: &MetricsReport) -> String {
    let mut s = String::from("segment,frequency,attended,present\n");
    for e in &report.raf {
        s.push_str(&format!("\"{}\",{},{},{}\n", e.segment.replace('"', "\"\""), e.frequency, e.attended, e.present));
    }
    s
}

fn predictions(results: &[DiagnosisResult], vocab: &Vocabulary) -> Result<String> {
    let mut s = String::new();
    for r in results {
        let line = json!({
            "id": r.record.id,
            "gold": r.record.gold,
            "predicted": r.predicted,
            "output": decode(&r.generated, vocab)?,
        });
        s.push_str(&line.to_string());
        s.push('\n');
    }
    Ok(s)
}

fn paired_pvalues(run: &mut Run, pairs: &[String]) -> Result<BTreeMap<String, f64>> {
    if pairs.is_empty() {
        return Ok(BTreeMap::new());
    }
    if pairs.len() < 2 {
        return Err(CliError::Config("--paired needs at least two fold pairs".into()));
    }
    let mut diffs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        let (x, y) = p
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("--paired expects A.json:B.json, got {p:?}")))?;
        let read = |run: &mut Run, path: &str| -> Result<Value> {
            let text = run.read_text(Path::new(path))?;
            Ok(serde_json::from_str(&text).map_err(eas_core::Error::from)?)
        };
        let (va, vb) = (read(run, x)?, read(run, y)?);
        for key in ["overall", "macro_f1", "rfs"] {
            if let (Some(fa), Some(fb)) = (va[key].as_f64(), vb[key].as_f64()) {
                diffs.entry(key.to_string()).or_default().push(fa - fb);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (k, d) in diffs {
        if d.len() == pairs.len() {
            out.insert(k, wilcoxon_one_sided(&d)?);
        }
    }
    Ok(out)
}

fn evaluate_typed<T: Scalar>(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut run = Run::new(cli)?;
    let mode: DiagnoseMode = a.mode.parse()?;
    let heads: Option<HeadSelection> = match &a.heads {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!("heads file {} not found", p.display())));
            }
            let text = run.read_text(p)?;
            Some(serde_json::from_str(&text).map_err(eas_core::Error::from)?)
        }
        None => None,
    };
    let vocab = read_vocab(&mut run, &vocab_path(&a.vocab, &a.checkpoint))?;
    let model = load_model::<T>(&mut run, &a.checkpoint, &vocab)?;
    if let Some(h) = &heads {
        h.validate(model.config.n_layers, model.config.n_heads)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let corpus = read_corpus(&mut run, &a.corpus)?;
    let discrepant = match &a.discrepant {
        Some(p) => Some(read_corpus(&mut run, p)?),
        None => None,
    };
    let labels: Vec<String> = corpus
        .iter()
        .chain(discrepant.iter().flatten())
        .map(|r| r.base.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let selected: Vec<&AnnotatedRecord> = match a.fold {
        Some(fold) => {
            if fold >= a.folds {
                return Err(CliError::Config(format!("fold {fold} outside {} folds", a.folds)));
            }
            let raws: Vec<RawRecord> = corpus.iter().map(|r| r.base.clone()).collect();
            let assignment = split_folds(&raws, a.folds, a.fold_seed)?;
            assignment.split(&corpus, fold, |r| &r.base.id).1
        }
        None => corpus.iter().collect(),
    };
    let annotated = !a.plain;
    let results = diagnose_all(&model, &selected, &labels, &vocab, mode, annotated)?;
    let mut report = MetricsReport::build(&results, &labels, heads.as_ref(), &vocab)?;
    report.wilcoxon = paired_pvalues(&mut run, &a.paired)?;
    run.write_json("metrics.json", &report)?;
    run.write("raf.csv", raf_csv(&report).as_bytes())?;
    run.write("predictions.jsonl", predictions(&results, &vocab)?.as_bytes())?;
    if let Some(d) = &discrepant {
        let refs: Vec<&AnnotatedRecord> = d.iter().collect();
        let results = diagnose_all(&model, &refs, &labels, &vocab, mode, annotated)?;
        let report = MetricsReport::build(&results, &labels, heads.as_ref(), &vocab)?;
        run.write_json("metrics_discrepant.json", &report)?;
        run.write("raf_discrepant.csv", raf_csv(&report).as_bytes())?;
        run.write("predictions_discrepant.jsonl", predictions(&results, &vocab)?.as_bytes())?;
    }
    let config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "corpus": a.corpus.display().to_string(),
        "discrepant": a.discrepant.as_ref().map(|p| p.display().to_string()),
        "heads": a.heads.as_ref().map(|p| p.display().to_string()),
        "mode": a.mode,
        "annotated": annotated,
        "fold": a.fold,
        "folds": a.folds,
        "fold_seed": a.fold_seed,
        "paired": a.paired,
        "records": selected.len(),
    });
    run.finish("evaluate.manifest.json", "evaluate", config, cli.seed, cli.threads)
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let mut run = Run::new(cli)?;
    let mut tables = Vec::new();
    for spec in &a.eas {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--eas expects name=path, got {spec:?}")))?;
        let text = run.read_text(Path::new(path))?;
        tables.push(parse_eas_csv(&text, name)?);
    }
    let shape = (tables[0].n_layers(), tables[0].n_heads());
    if tables.iter().any(|t| (t.n_layers(), t.n_heads()) != shape) {
        return Err(CliError::Data("score tables come from models of different shape".into()));
    }
    if a.top_k == 0 || a.top_k > shape.0 * shape.1 {
        return Err(CliError::Config(format!("top-k must lie in 1..={}", shape.0 * shape.1)));
    }
    let names: Vec<String> = tables.iter().map(|t| t.dataset.clone()).collect();
    let mut summary = BTreeMap::new();
    for stage in Stage::ALL {
        let sets: Vec<(String, BTreeSet<_>)> = tables
            .iter()
            .map(|t| (t.dataset.clone(), top_k_heads(t, stage, a.top_k).into_iter().collect()))
            .collect();
        let m = jaccard_matrix(&sets)?;
        let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
        let svg = matrix_heatmap(&format!("top-{} overlap / {}", a.top_k, stage.name()), &names, &rows);
        run.write(&format!("jaccard_{}.svg", stage.name()), svg.as_bytes())?;
        let top: BTreeMap<String, Vec<String>> = tables
            .iter()
            .map(|t| {
                (
                    t.dataset.clone(),
                    top_k_heads(t, stage, a.top_k).iter().map(|h| h.label()).collect(),
                )
            })
            .collect();
        summary.insert(stage.name(), json!({"names": names, "matrix": rows, "top_heads": top}));
        for t in &tables {
            run.write(
                &format!("heatmap_{}_{}.svg", t.dataset, stage.name()),
                stage_heatmap(t, stage).as_bytes(),
            )?;
        }
    }
    run.write_json("jaccard.json", &summary)?;
    let config = json!({"eas": a.eas, "top_k": a.top_k});
    run.finish("report.manifest.json", "report", config, cli.seed, cli.threads)
}
