//! Command-line interface: `gen-data`, `train`, `infer`, `select` and `eval`.
//!
//! Every command writes `manifest.txt` into its output directory before any
//! other file; the manifest is rewritten with the full artifact list once the
//! command finishes. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::anchor::{canonical_to_pixels, AnchorConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::image::{overlay_pair, read_pgm_mask, write_pgm_mask, write_ppm};
use crate::mask::Mask;
use crate::metrics::MetricReport;
use crate::model::ModelConfig;
use crate::pccs::{select_for, SelectMode, Selection};
use crate::pipeline::{prepare, ExpertKind, Prepared};
use crate::synth::{generate_dataset, load_dataset, save_pair, SceneConfig, ViewPair};
use crate::training::{build_experts, pretrain_point_decoder, train_expert, TrainConfig, TrainLog};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.v2ck";

#[derive(Debug, Parser)]
#[command(name = "v2lab", version, about = "Cross-view object correspondence on synthetic view pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of view pairs.
    GenData(GenDataArgs),
    /// Pre-train the point decoder and train the Visual / Fusion experts.
    Train(TrainArgs),
    /// Predict target masks, optionally selecting among experts.
    Infer(InferArgs),
    /// Score every expert per pair and write the selection table.
    Select(SelectArgs),
    /// Compute IoU and localisation error against the ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpertArg {
    Anchor,
    Visual,
    Fusion,
    All,
}

impl ExpertArg {
    fn kinds(self) -> Vec<ExpertKind> {
        match self {
            ExpertArg::Anchor => vec![ExpertKind::Anchor],
            ExpertArg::Visual => vec![ExpertKind::Visual],
            ExpertArg::Fusion => vec![ExpertKind::Fusion],
            ExpertArg::All => ExpertKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Pccs,
    Cyclemask,
    None,
}

impl From<SelectArg> for SelectMode {
    fn from(s: SelectArg) -> Self {
        match s {
            SelectArg::Pccs => SelectMode::Pccs,
            SelectArg::Cyclemask => SelectMode::CycleMask,
            SelectArg::None => SelectMode::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Scene configuration (`key=value`); `n_pairs` sets the dataset size.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration; `model.<key>` entries configure the model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub expert: ExpertArg,
    /// Continue from this checkpoint instead of pre-training from scratch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Required unless `--anchor-only` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Anchor configuration (`key=value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the reference-point sampling used by the selectors.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub expert: ExpertArg,
    #[arg(long, value_enum, default_value = "pccs")]
    pub select: SelectArg,
    #[arg(long)]
    pub n_anchor_points: Option<usize>,
    /// Also write every expert's mask.
    #[arg(long)]
    pub dump_all: bool,
    /// Write side-by-side query / prediction overlays.
    #[arg(long)]
    pub overlay: bool,
    /// Only write the anchor points of each pair as `x,y,label` CSV.
    #[arg(long)]
    pub anchor_only: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "pccs")]
    pub select: SelectArg,
    #[arg(long)]
    pub n_anchor_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of predictions laid out as `<pair_id>/<mask-name>`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub pred: Option<PathBuf>,
    #[arg(long, default_value = "pred.pgm")]
    pub mask_name: String,
    /// Evaluate a checkpoint directly instead of stored predictions.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub expert: ExpertArg,
    #[arg(long, value_enum, default_value = "pccs")]
    pub select: SelectArg,
    #[arg(long)]
    pub n_anchor_points: Option<usize>,
}

/// Configuration of `gen-data`: scene keys plus `n_pairs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub n_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            n_pairs: 512,
        }
    }
}

impl KeyValue for DataConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_pairs" => self.n_pairs = config::parse(key, value)?,
            _ => self.scene.set(key, value)?,
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![("n_pairs", self.n_pairs.to_string())];
        v.extend(self.scene.entries());
        v
    }

    fn validate(&self) -> Result<()> {
        self.scene.validate()
    }
}

/// Configuration of `train`: training keys, plus model keys prefixed with `model.`.
/// Defaults are the short-schedule settings of [`TrainConfig::desk`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            model: ModelConfig::default(),
        }
    }
}

impl KeyValue for TrainRunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.strip_prefix("model.") {
            Some(k) => self.model.set(k, value).map_err(|e| match e {
                Error::UnknownKey(_) => Error::UnknownKey(key.to_string()),
                e => e,
            }),
            None => self.train.set(key, value),
        }
    }

    /// Training entries only; `to_text` adds the prefixed model entries.
    fn entries(&self) -> Vec<(&'static str, String)> {
        self.train.entries()
    }

    fn to_text(&self) -> String {
        let mut out = self.train.to_text();
        for (k, v) in self.model.entries() {
            out.push_str(&format!("model.{k}={v}\n"));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }
}

/// Provenance record of one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Effective configuration after defaults and overrides.
    pub config_text: String,
    pub seed: Option<u64>,
    /// SHA-256 over every input file, in path order.
    pub input_hash: String,
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub complete: bool,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        s.push_str(&format!("argv={}\n", self.argv.join(" ")));
        if let Some(p) = &self.config_path {
            s.push_str(&format!("config_path={}\n", p.display()));
        }
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed={seed}\n"));
        }
        s.push_str(&format!("input_hash={}\n", self.input_hash));
        s.push_str(&format!("out_dir={}\n", self.out_dir.display()));
        s.push_str(&format!("complete={}\n", self.complete));
        for a in &self.artifacts {
            s.push_str(&format!("artifact={}\n", a.display()));
        }
        for line in self.config_text.lines() {
            s.push_str(&format!("config.{line}\n"));
        }
        s
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    fn finish(&mut self) -> Result<()> {
        self.complete = true;
        self.write()
    }
}

/// SHA-256 over `(path relative to its input root, contents)` of every file
/// under `inputs`, sorted by path within each root.
pub fn hash_inputs(inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for &root in inputs {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        files.sort();
        for f in files {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for e in fs::read_dir(p).map_err(|e| Error::io(p, e))? {
            let e = e.map_err(|e| Error::io(p, e))?;
            collect_files(&e.path(), out)?;
        }
    } else {
        out.push(p.to_path_buf());
    }
    Ok(())
}

fn load_or_default<T: KeyValue + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => config::load(p),
        None => Ok(T::default()),
    }
}

fn manifest(command: &str, config_path: Option<&Path>, config_text: String, seed: Option<u64>, inputs: &[&Path], out: &Path) -> Result<RunManifest> {
    let mut all: Vec<&Path> = inputs.to_vec();
    if let Some(p) = config_path {
        all.push(p);
    }
    let m = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config_path: config_path.map(Path::to_path_buf),
        config_text,
        seed,
        input_hash: hash_inputs(&all)?,
        out_dir: out.to_path_buf(),
        artifacts: Vec::new(),
        complete: false,
    };
    m.write()?;
    Ok(m)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: DataConfig = load_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.scene.seed = seed;
    }
    let mut m = manifest("gen-data", args.config.as_deref(), cfg.to_text(), Some(cfg.scene.seed), &[], &args.out)?;
    let pairs = generate_dataset(&cfg.scene, cfg.n_pairs)?;
    for (i, pair) in pairs.iter().enumerate() {
        let dir = args.out.join(format!("pair_{i:04}"));
        save_pair(pair, &dir, &[("index", i.to_string()), ("dataset_seed", cfg.scene.seed.to_string())])?;
        m.artifacts.push(dir);
    }
    m.finish()?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

fn load_pairs(dir: &Path) -> Result<Vec<(String, ViewPair)>> {
    let pairs = load_dataset(dir)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("no pair_* directories under {}", dir.display())));
    }
    Ok(pairs)
}

fn prepare_all(pairs: &[(String, ViewPair)], model: &ModelConfig, anchor: &AnchorConfig) -> Result<Vec<Prepared>> {
    let backend = model.backend();
    pairs.iter().map(|(id, p)| prepare(id.clone(), p, &backend, anchor)).collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    if args.expert == ExpertArg::Anchor {
        return Err(Error::TrainingFree("anchor"));
    }
    let mut cfg: TrainRunConfig = load_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(r) = &args.resume {
        inputs.push(r);
    }
    let mut m = manifest("train", args.config.as_deref(), cfg.to_text(), Some(cfg.train.seed), &inputs, &args.out)?;
    let pairs = load_pairs(&args.data)?;

    let (model, mut experts) = match &args.resume {
        Some(path) => {
            let (ck, _) = load_checkpoint(path, Some(&cfg.model))?;
            (ck.model, ck.experts)
        }
        None => {
            let scene = SceneConfig::default().with_seed(cfg.train.seed ^ 0x00C0_FFEE);
            let (decoder, log) = pretrain_point_decoder(&cfg.model, &scene, &cfg.train, |row| {
                if row.step % 100 == 0 {
                    log::info!("pretrain step {} loss {:.4}", row.step, row.loss.total);
                }
            })?;
            let p = args.out.join("pretrain_log.csv");
            write_text(&p, &log.to_csv())?;
            m.artifacts.push(p);
            let experts = build_experts(&cfg.model, &decoder, cfg.train.seed)?;
            (cfg.model.clone(), experts)
        }
    };

    let data = prepare_all(&pairs, &model, &AnchorConfig::default())?;
    for kind in args.expert.kinds() {
        if kind == ExpertKind::Anchor {
            continue;
        }
        let expert = experts
            .iter_mut()
            .find(|e| e.kind == kind)
            .ok_or_else(|| Error::Config(format!("checkpoint has no {kind} expert")))?;
        let log: TrainLog = train_expert(expert, &data, &cfg.train, |row| {
            if row.step % 100 == 0 {
                log::info!("{kind} step {} loss {:.4}", row.step, row.loss.total);
            }
        })?;
        let p = args.out.join(format!("{kind}_log.csv"));
        write_text(&p, &log.to_csv())?;
        m.artifacts.push(p);
        println!("{kind}: {} steps, final loss {:.4}", log.rows.len(), log.final_loss().unwrap_or(f64::NAN));
    }
    let ck = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &model, &experts)?;
    m.artifacts.push(ck);
    m.finish()
}

fn anchor_config(path: Option<&Path>, n_points: Option<usize>) -> Result<AnchorConfig> {
    let mut a: AnchorConfig = load_or_default(path)?;
    if let Some(n) = n_points {
        a.n_points = n;
        a.validate()?;
    }
    Ok(a)
}

/// Every requested expert's mask on one pair plus the selection among them.
struct PairResult {
    masks: Vec<(ExpertKind, Mask)>,
    selection: Selection,
}

impl PairResult {
    fn selected_mask(&self) -> &Mask {
        let k = ExpertKind::from_tag(self.selection.selected as u8).expect("selected id is an expert tag");
        &self.masks.iter().find(|(kind, _)| *kind == k).expect("selected expert was run").1
    }
}

fn run_experts(ck: &Checkpoint, p: &Prepared, kinds: &[ExpertKind], mode: SelectMode, anchor: &AnchorConfig, seed: u64) -> Result<PairResult> {
    let mut masks = Vec::with_capacity(kinds.len());
    for &k in kinds {
        let e = ck
            .expert(k)
            .ok_or_else(|| Error::Config(format!("checkpoint has no {k} expert")))?;
        masks.push((k, e.predict(p)?.mask));
    }
    let candidates: Vec<(usize, Mask)> = masks.iter().map(|(k, m)| (k.tag() as usize, m.clone())).collect();
    let point_decoder = &ck
        .expert(ExpertKind::Anchor)
        .ok_or_else(|| Error::Config("checkpoint has no anchor expert".into()))?
        .decoder;
    let mode = if kinds.len() == 1 { SelectMode::None } else { mode };
    let selection = select_for(p, &candidates, mode, anchor, point_decoder, seed)?;
    Ok(PairResult { masks, selection })
}

fn selection_csv(rows: &[(String, Selection)]) -> String {
    let mut s = String::from("pair_id,expert,score,selected\n");
    for (id, sel) in rows {
        for sc in &sel.scores {
            let kind = ExpertKind::from_tag(sc.expert_id as u8).map_or("?", |k| k.name());
            s.push_str(&format!(
                "{id},{kind},{:.6},{}\n",
                sc.mean_dist,
                u8::from(sc.expert_id == sel.selected)
            ));
        }
    }
    s
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let anchor = anchor_config(args.config.as_deref(), args.n_anchor_points)?;
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(c) = &args.checkpoint {
        inputs.push(c);
    }
    let mut m = manifest("infer", args.config.as_deref(), anchor.to_text(), Some(args.seed), &inputs, &args.out)?;
    let pairs = load_pairs(&args.data)?;

    if args.anchor_only {
        let model = match &args.checkpoint {
            Some(c) => load_checkpoint(c, None)?.0.model,
            None => ModelConfig::default(),
        };
        let data = prepare_all(&pairs, &model, &anchor)?;
        for p in &data {
            let mut csv = String::from("x,y,label\n");
            if let Some(a) = &p.anchor {
                let (w, h) = p.query_mask.dims();
                for (pt, &l) in canonical_to_pixels(&a.points, a.canonical_size, (w, h)).iter().zip(&a.labels) {
                    csv.push_str(&format!("{:.3},{:.3},{}\n", pt.x, pt.y, u8::from(l)));
                }
            }
            let dir = args.out.join(&p.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("anchors.csv");
            write_text(&path, &csv)?;
            m.artifacts.push(path);
        }
        return m.finish();
    }

    let ck_path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required unless --anchor-only is given".into()))?;
    let (ck, _) = load_checkpoint(ck_path, None)?;
    let data = prepare_all(&pairs, &ck.model, &anchor)?;
    let kinds = args.expert.kinds();
    let mut rows = Vec::with_capacity(data.len());
    for (p, (_, pair)) in data.iter().zip(&pairs) {
        let r = run_experts(&ck, p, &kinds, args.select.into(), &anchor, args.seed)?;
        let dir = args.out.join(&p.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("pred.pgm");
        write_pgm_mask(&path, r.selected_mask())?;
        m.artifacts.push(path);
        if args.dump_all {
            for (k, mask) in &r.masks {
                let path = dir.join(format!("pred_{k}.pgm"));
                write_pgm_mask(&path, mask)?;
                m.artifacts.push(path);
            }
        }
        if args.overlay {
            let path = dir.join("overlay.ppm");
            write_ppm(&path, &overlay_pair(&pair.query_image, &pair.query_mask, &pair.target_image, r.selected_mask()))?;
            m.artifacts.push(path);
        }
        rows.push((p.id.clone(), r.selection));
    }
    if kinds.len() > 1 && SelectMode::from(args.select) != SelectMode::None {
        let path = args.out.join("selection.csv");
        write_text(&path, &selection_csv(&rows))?;
        m.artifacts.push(path);
    }
    m.finish()
}

pub fn cmd_select(args: &SelectArgs) -> Result<()> {
    let anchor = anchor_config(args.config.as_deref(), args.n_anchor_points)?;
    let mut m = manifest(
        "select",
        args.config.as_deref(),
        anchor.to_text(),
        Some(args.seed),
        &[&args.data, &args.checkpoint],
        &args.out,
    )?;
    let pairs = load_pairs(&args.data)?;
    let (ck, _) = load_checkpoint(&args.checkpoint, None)?;
    let data = prepare_all(&pairs, &ck.model, &anchor)?;
    let mode: SelectMode = args.select.into();
    if mode == SelectMode::None {
        return Err(Error::Config("select needs --select pccs or cyclemask".into()));
    }
    let mut rows = Vec::with_capacity(data.len());
    for p in &data {
        let r = run_experts(&ck, p, &ExpertKind::ALL, mode, &anchor, args.seed)?;
        rows.push((p.id.clone(), r.selection));
    }
    let path = args.out.join("selection.csv");
    write_text(&path, &selection_csv(&rows))?;
    m.artifacts.push(path);
    m.finish()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let anchor = anchor_config(args.config.as_deref(), args.n_anchor_points)?;
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(p) = &args.pred {
        inputs.push(p);
    }
    if let Some(c) = &args.checkpoint {
        inputs.push(c);
    }
    let mut m = manifest("eval", args.config.as_deref(), anchor.to_text(), Some(args.seed), &inputs, &args.out)?;
    let pairs = load_pairs(&args.data)?;
    let mut report = MetricReport::default();
    match (&args.pred, &args.checkpoint) {
        (Some(pred), None) => {
            for (id, pair) in &pairs {
                let mask = read_pgm_mask(pred.join(id).join(&args.mask_name))?;
                report.push(id.clone(), &mask, &pair.target_mask)?;
            }
        }
        (None, Some(ck_path)) => {
            let (ck, _) = load_checkpoint(ck_path, None)?;
            let data = prepare_all(&pairs, &ck.model, &anchor)?;
            let kinds = args.expert.kinds();
            for p in &data {
                let r = run_experts(&ck, p, &kinds, args.select.into(), &anchor, args.seed)?;
                report.push(p.id.clone(), r.selected_mask(), &p.target_mask)?;
            }
        }
        _ => return Err(Error::Config("eval needs exactly one of --pred or --checkpoint".into())),
    }
    let path = args.out.join("metrics.csv");
    write_text(&path, &report.to_csv())?;
    m.artifacts.push(path);
    println!("mean IoU {:.4}  mean Loc.E {:.4}  ({} pairs)", report.iou, report.loc_e, report.len());
    m.finish()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Select(a) => cmd_select(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Exit code of a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::TrainingFree(_) => 2,
        _ => 1,
    }
}

/// Caps the tensor backend's thread pool from `V2LAB_THREADS` (0 means one thread).
fn apply_thread_cap() {
    if let Ok(v) = std::env::var("V2LAB_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            std::env::set_var("RAYON_NUM_THREADS", n.max(1).to_string());
        }
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    apply_thread_cap();
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
