//! The `idsis` command suite.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Tensor;
use crate::checkpoint::file_sha256;
use crate::config::{ConfigLayers, RunConfig, KEYS, SEED_ENV};
use crate::data::{load_dataset, one_hot, png_io, read_meta, write_toy_dataset, FaceRecord, Layout, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    attack_success_rate, calibrate_threshold, cosine_suite, distinct_identity_pairs, embed_records,
    frechet_feature_distance, impostor_scores, mean_abs_difference, pair_score, reconstruct_all, style_swap_sweep,
    write_sweep_csv, AttackContext, EvalReport, RecordPair, SwapSet,
};
use crate::generator::attention_heatmaps;
use crate::identity::{train_fr, FREmbedder, FrRole, PooledTrunk};
use crate::model::Synthesizer;
use crate::plot::{attention_overlays, loss_chart_svg, sweep_chart_svg, AttentionBlock, AttentionDump};
use crate::train::{read_metrics, TrainState, Trainer};

#[derive(Parser, Debug)]
#[command(name = "idsis", version, about = "Identity-conditioned semantic face synthesis and impersonation evaluation")]
struct Cli {
    /// Key-value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone)]
enum Cmd {
    /// Render the toy dataset into dataset_dir.
    GenData,
    /// Train a face recognizer.
    TrainFr {
        #[arg(long, value_enum)]
        role: RoleArg,
    },
    /// Train the synthesizer with the frozen train-FR.
    Train {
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct one test image from its own mask, styles and identity.
    Reconstruct(OneImage),
    /// Attacker mask and styles with the target's identity.
    SwapId(PairArgs),
    /// Attacker mask with some style classes taken from the target.
    SwapStyle {
        #[command(flatten)]
        pair: PairArgs,
        /// Swap set (Skin, Eyes, Eyebrows, Mouth, Hair, FullSwap) or comma-separated class names.
        #[arg(long)]
        swap: String,
        /// Also inject the target's identity.
        #[arg(long)]
        target_identity: bool,
    },
    /// Mean eval-FR cosine of test-split reconstructions.
    EvalRecon(ModelArg),
    /// FAR-calibrated threshold and identity-swap attack success rate.
    EvalAttack(ModelArg),
    /// Style-swap sweep: ASR and perceptual distance per swap set.
    EvalSweep(ModelArg),
    /// Dump per-block attention maps of one reconstruction.
    AttnMaps(OneImage),
    /// Render charts and overlays from emitted CSV/JSON files.
    Plot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoleArg {
    Train,
    Eval,
}

impl From<RoleArg> for FrRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Train => FrRole::Train,
            RoleArg::Eval => FrRole::Eval,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArg {
    /// Synthesizer checkpoint (default: the latest training checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct OneImage {
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    model: ModelArg,
}

#[derive(Args, Debug, Clone)]
struct PairArgs {
    /// Test-split index of the attacker (mask, styles).
    #[arg(long)]
    attacker: usize,
    /// Test-split index of the target (identity).
    #[arg(long)]
    target: usize,
    #[command(flatten)]
    model: ModelArg,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData => "gen-data",
            Cmd::TrainFr { .. } => "train-fr",
            Cmd::Train { .. } => "train",
            Cmd::Reconstruct(_) => "reconstruct",
            Cmd::SwapId(_) => "swap-id",
            Cmd::SwapStyle { .. } => "swap-style",
            Cmd::EvalRecon(_) => "eval-recon",
            Cmd::EvalAttack(_) => "eval-attack",
            Cmd::EvalSweep(_) => "eval-sweep",
            Cmd::AttnMaps(_) => "attn-maps",
            Cmd::Plot => "plot",
        }
    }
}

fn key_flag(name: &str) -> String {
    name.replace('_', "-")
}

fn command() -> Command {
    let mut cmd = Cli::command();
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(key_flag(k.name))
                .global(true)
                .action(ArgAction::Set)
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default))
                .help_heading("Config overrides"),
        );
    }
    cmd
}

fn resolve_config(m: &ArgMatches, config: Option<&Path>, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut layers = ConfigLayers::new();
    if let Some(p) = config {
        if !p.exists() {
            return Err(Error::Config(format!("config file {} does not exist", p.display())));
        }
        layers.file(p)?;
    }
    for k in KEYS {
        if let Some(v) = find_value(m, k.name) {
            layers.set(k.name, &v)?;
        }
    }
    layers.resolve(env_seed)
}

/// Global args may land on the subcommand's matches.
fn find_value(m: &ArgMatches, id: &str) -> Option<String> {
    if let Ok(Some(v)) = m.try_get_one::<String>(id) {
        return Some(v.clone());
    }
    m.subcommand().and_then(|(_, sub)| find_value(sub, id))
}

/// Parse, run, report; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let result = resolve_config(&matches, cli.config.as_deref(), env_seed.as_deref())
        .and_then(|cfg| execute(&cli.command, &cfg));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: String,
    pub manifest: PathBuf,
}

/// Paths derived from the config.
#[derive(Clone, Debug)]
pub struct ArtifactLayout {
    pub dataset: PathBuf,
    pub train_fr: PathBuf,
    pub eval_fr: PathBuf,
    pub synth_dir: PathBuf,
    pub out: PathBuf,
}

pub fn layout(cfg: &RunConfig) -> ArtifactLayout {
    ArtifactLayout {
        dataset: cfg.dataset_dir.clone(),
        train_fr: cfg.checkpoint_dir.join("train_fr.safetensors"),
        eval_fr: cfg.checkpoint_dir.join("eval_fr.safetensors"),
        synth_dir: cfg.checkpoint_dir.join("synth"),
        out: cfg.output_dir.clone(),
    }
}


/// Exclusive writer lock on an artifact directory.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".idsis.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "{} is locked by another run ({}); remove the lock file if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written next to every command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub config_hash: String,
    /// Canonical key-value text of the resolved config.
    pub config: String,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest.{command}.json")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths.iter().map(|p| Ok(FileHash { path: p.clone(), sha256: file_sha256(p)? })).collect()
}

fn write_manifest(
    dir: &Path,
    cmd: &Cmd,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let m = RunManifest {
        command: cmd.name().into(),
        args: args_json(cmd),
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        seeds: json!({
            "seed": cfg.seed,
            "data_seed": cfg.data_seed,
            "eval_seed": cfg.eval_seed,
            "train_fr_seed": cfg.train_fr_seed,
            "eval_fr_seed": cfg.eval_fr_seed,
        }),
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let path = dir.join(RunManifest::file_name(cmd.name()));
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(Error::io(&path))?;
    Ok(path)
}

fn args_json(cmd: &Cmd) -> serde_json::Value {
    let ck = |m: &ModelArg| m.checkpoint.as_ref().map(|p| p.display().to_string());
    match cmd {
        Cmd::TrainFr { role } => json!({ "role": format!("{role:?}").to_lowercase() }),
        Cmd::Train { resume } => json!({ "resume": resume }),
        Cmd::Reconstruct(o) | Cmd::AttnMaps(o) => json!({ "index": o.index, "checkpoint": ck(&o.model) }),
        Cmd::SwapId(p) => json!({ "attacker": p.attacker, "target": p.target, "checkpoint": ck(&p.model) }),
        Cmd::SwapStyle { pair, swap, target_identity } => json!({
            "attacker": pair.attacker, "target": pair.target, "swap": swap,
            "target_identity": target_identity, "checkpoint": ck(&pair.model),
        }),
        Cmd::EvalRecon(m) | Cmd::EvalAttack(m) | Cmd::EvalSweep(m) => json!({ "checkpoint": ck(m) }),
        Cmd::GenData | Cmd::Plot => json!({}),
    }
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { path: path.to_path_buf(), producer })
    }
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<(Vec<FaceRecord>, Vec<String>, usize)> {
    let l = layout(cfg);
    require(&l.dataset.join("meta.json"), "gen-data")?;
    let meta = read_meta(&l.dataset)?.expect("meta.json checked above");
    if meta.resolution != cfg.resolution {
        return Err(Error::Validation(format!(
            "dataset {} is {} px but resolution is {}",
            l.dataset.display(),
            meta.resolution,
            cfg.resolution
        )));
    }
    if meta.class_names.len() != cfg.classes {
        return Err(Error::Validation(format!(
            "dataset has {} classes but config has classes = {}",
            meta.class_names.len(),
            cfg.classes
        )));
    }
    let records = load_dataset(&l.dataset, Layout::Toy, split)?;
    Ok((records, meta.class_names, meta.identity_count))
}

fn load_fr(cfg: &RunConfig, role: FrRole) -> Result<(FREmbedder, PathBuf)> {
    let l = layout(cfg);
    let path = match role {
        FrRole::Train => l.train_fr,
        FrRole::Eval => l.eval_fr,
    };
    require(&path, match role {
        FrRole::Train => "train-fr --role train",
        FrRole::Eval => "train-fr --role eval",
    })?;
    let fr = FREmbedder::load(&path)?;
    if fr.role() != role {
        return Err(Error::Checkpoint(format!("{} holds a {} model, expected {role}", path.display(), fr.role())));
    }
    Ok((fr, path))
}

fn load_model(cfg: &RunConfig, arg: &ModelArg) -> Result<(Synthesizer, PathBuf)> {
    let path = arg.checkpoint.clone().unwrap_or_else(|| layout(cfg).synth_dir.join("latest.safetensors"));
    require(&path, "train")?;
    let (model, _, _) = Synthesizer::load(&path)?;
    Ok((model, path))
}

fn pick<'a>(records: &'a [FaceRecord], i: usize, what: &str) -> Result<&'a FaceRecord> {
    records
        .get(i)
        .ok_or_else(|| Error::Validation(format!("{what} index {i} is out of range for {} test records", records.len())))
}

/// Colour label map for visualisation.
fn mask_rgb(labels: &[u8]) -> Vec<u8> {
    const PALETTE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 190, 150],
        [120, 70, 30],
        [60, 120, 220],
        [50, 160, 60],
        [200, 40, 60],
        [240, 220, 60],
        [160, 60, 200],
    ];
    labels.iter().flat_map(|&l| PALETTE[l as usize % PALETTE.len()]).collect()
}

fn write_image(dir: &Path, name: &str, t: &Tensor<f32>, outs: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    png_io::write_rgb(&p, t)?;
    outs.push(p);
    Ok(())
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize, outs: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v)?).map_err(Error::io(&p))?;
    outs.push(p);
    Ok(())
}

fn diff_heat(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (a.dim(1), a.dim(2));
    let n = h * w;
    (0..n)
        .map(|p| {
            let d: f32 = (0..3).map(|c| (a.data()[c * n + p] - b.data()[c * n + p]).abs()).sum::<f32>() / 3.0;
            (d / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn eval_report(path: &Path, checkpoint: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let ck = checkpoint.display().to_string();
    if path.exists() {
        let r = EvalReport::read_json(path)?;
        if r.checkpoint == ck && r.far_target == cfg.far_target {
            return Ok(r);
        }
    }
    Ok(EvalReport::new(&ck, cfg.far_target))
}

fn calibrated_tau(cfg: &RunConfig, eval_fr: &FREmbedder, test: &[FaceRecord]) -> Result<f64> {
    let imp = distinct_identity_pairs(test, cfg.impostor_pairs, cfg.eval_seed, "impostor")?;
    calibrate_threshold(&impostor_scores(eval_fr, test, &imp)?, cfg.far_target)
}

fn attack_pairs(cfg: &RunConfig, test: &[FaceRecord]) -> Result<Vec<RecordPair>> {
    distinct_identity_pairs(test, cfg.attack_pairs, cfg.eval_seed, "attack")
}

/// Run one command with a resolved config.
fn execute(cmd: &Cmd, cfg: &RunConfig) -> Result<Outcome> {
    let l = layout(cfg);
    match cmd {
        Cmd::GenData => {
            let _lock = DirLock::acquire(&l.dataset)?;
            let meta = write_toy_dataset(&l.dataset, &cfg.data())?;
            let m = write_manifest(&l.dataset, cmd, cfg, &[], &[l.dataset.join("meta.json")])?;
            Ok(Outcome { summary: format!("wrote {} records to {}", meta.records.len(), l.dataset.display()), manifest: m })
        }
        Cmd::TrainFr { role } => {
            let role: FrRole = (*role).into();
            let (train, _, ids) = dataset(cfg, Split::Train)?;
            let _lock = DirLock::acquire(&cfg.checkpoint_dir)?;
            let fr = train_fr(&train, &cfg.fr(role, ids))?;
            let path = match role {
                FrRole::Train => l.train_fr.clone(),
                FrRole::Eval => l.eval_fr.clone(),
            };
            fr.save(&path)?;
            if role == FrRole::Eval && l.train_fr.exists() {
                let other = FREmbedder::load(&l.train_fr)?;
                crate::identity::check_independent(&other.config, &fr.config)?;
            }
            let m = write_manifest(&cfg.checkpoint_dir, cmd, cfg, &[l.dataset.join("meta.json")], std::slice::from_ref(&path))?;
            Ok(Outcome {
                summary: format!("{role}: training accuracy {:.3}, saved {}", fr.train_accuracy, path.display()),
                manifest: m,
            })
        }
        Cmd::Train { resume } => {
            let (train, _, _) = dataset(cfg, Split::Train)?;
            let (fr, fr_path) = load_fr(cfg, FrRole::Train)?;
            let _lock = DirLock::acquire(&l.synth_dir)?;
            let latest = l.synth_dir.join("latest.safetensors");
            let state = if *resume {
                require(&latest, "train")?;
                let mut s = TrainState::load(&latest)?;
                if s.model.config != cfg.model() {
                    return Err(Error::Validation("checkpoint model config differs from the current config".into()));
                }
                s.config = cfg.train();
                s
            } else {
                let metrics = l.synth_dir.join("metrics.jsonl");
                if metrics.exists() {
                    fs::remove_file(&metrics).map_err(Error::io(&metrics))?;
                }
                TrainState::new(cfg.model(), &cfg.train())?
            };
            let mut trainer = Trainer::new(state, &train, &fr)?;
            let report = trainer.run(Some(&l.synth_dir))?;
            let mut outs: Vec<PathBuf> = report.checkpoints.iter().map(|c| c.1.clone()).collect();
            outs.push(l.synth_dir.join("metrics.jsonl"));
            let m = write_manifest(&l.synth_dir, cmd, cfg, &[fr_path], &outs)?;
            Ok(Outcome {
                summary: format!(
                    "trained to iteration {} in {:.0}s; final L_adv_G {:.3} L_adv_D {:.3} L_id {:.3}",
                    trainer.state.iteration, report.seconds, report.final_losses.adv_g, report.final_losses.adv_d,
                    report.final_losses.id
                ),
                manifest: m,
            })
        }
        Cmd::Reconstruct(o) => {
            let (test, _, _) = dataset(cfg, Split::Test)?;
            let (model, ck) = load_model(cfg, &o.model)?;
            let (tfr, tp) = load_fr(cfg, FrRole::Train)?;
            let (efr, ep) = load_fr(cfg, FrRole::Eval)?;
            let rec = pick(&test, o.index, "record")?;
            let dir = l.out.join("reconstruct");
            let _lock = DirLock::acquire(&dir)?;
            let out = reconstruct_all(&model, &tfr, std::slice::from_ref(rec))?.remove(0);
            let mut outs = vec![];
            write_image(&dir, "input.png", &rec.image, &mut outs)?;
            let mp = dir.join("mask.png");
            png_io::write_rgb8(&mp, rec.mask.width, rec.mask.height, &mask_rgb(&rec.mask.labels))?;
            outs.push(mp);
            write_image(&dir, "output.png", &out, &mut outs)?;
            let scores = json!({
                "index": o.index,
                "identity_id": rec.identity_id,
                "train-FR": pair_score(&tfr, &rec.image, &out)?,
                "eval-FR": pair_score(&efr, &rec.image, &out)?,
            });
            write_json(&dir, "scores.json", &scores, &mut outs)?;
            let m = write_manifest(&dir, cmd, cfg, &[ck, tp, ep], &outs)?;
            Ok(Outcome { summary: format!("reconstruction scores {scores}"), manifest: m })
        }
        Cmd::SwapId(p) | Cmd::SwapStyle { pair: p, .. } => {
            let (test, class_names, _) = dataset(cfg, Split::Test)?;
            let (model, ck) = load_model(cfg, &p.model)?;
            let (tfr, tp) = load_fr(cfg, FrRole::Train)?;
            let (efr, ep) = load_fr(cfg, FrRole::Eval)?;
            let (a, t) = (pick(&test, p.attacker, "attacker")?, pick(&test, p.target, "target")?);
            if a.identity_id == t.identity_id {
                return Err(Error::Validation(format!(
                    "attacker and target must be different identities (both are identity {})",
                    a.identity_id
                )));
            }
            let (swap, use_target_id, dir) = match cmd {
                Cmd::SwapStyle { swap, target_identity, .. } => {
                    (parse_swap(swap, &class_names)?, *target_identity, l.out.join("swap-style"))
                }
                _ => (vec![], true, l.out.join("swap-id")),
            };
            let _lock = DirLock::acquire(&dir)?;
            let ctx = AttackContext::new(&model, &tfr, &efr, &test)?;
            let pair = [RecordPair { first: p.attacker, second: p.target }];
            let own = ctx.generate(&pair, &[], false)?.remove(0);
            let out = ctx.generate(&pair, &swap, use_target_id)?.remove(0);
            let mut outs = vec![];
            write_image(&dir, "attacker.png", &a.image, &mut outs)?;
            write_image(&dir, "target.png", &t.image, &mut outs)?;
            write_image(&dir, "own.png", &own, &mut outs)?;
            write_image(&dir, "output.png", &out, &mut outs)?;
            let dp = dir.join("difference.png");
            png_io::write_gray(&dp, out.dim(2), out.dim(1), &diff_heat(&own, &out))?;
            outs.push(dp);
            let scores = json!({
                "attacker_identity": a.identity_id,
                "target_identity": t.identity_id,
                "swapped_classes": swap.iter().map(|&c| class_names[c].clone()).collect::<Vec<_>>(),
                "score_target": pair_score(&efr, &out, &t.image)?,
                "score_attacker": pair_score(&efr, &out, &a.image)?,
                "mean_abs_difference_to_own": mean_abs_difference(&own, &out),
            });
            write_json(&dir, "scores.json", &scores, &mut outs)?;
            let m = write_manifest(&dir, cmd, cfg, &[ck, tp, ep], &outs)?;
            Ok(Outcome { summary: format!("{} scores {scores}", cmd.name()), manifest: m })
        }
        Cmd::EvalRecon(arg) => {
            let (test, _, _) = dataset(cfg, Split::Test)?;
            let (model, ck) = load_model(cfg, arg)?;
            let (tfr, tp) = load_fr(cfg, FrRole::Train)?;
            let (efr, ep) = load_fr(cfg, FrRole::Eval)?;
            let dir = l.out.join("eval");
            let _lock = DirLock::acquire(&dir)?;
            let suite = cosine_suite(&model, efr_train_pair(&tfr), &efr, &test)?;
            let suite_train = cosine_suite(&model, &tfr, &tfr, &test)?;
            let recon = reconstruct_all(&model, &tfr, &test)?;
            let real: Vec<&Tensor<f32>> = test.iter().map(|r| &r.image).collect();
            let fake: Vec<&Tensor<f32>> = recon.iter().collect();
            let fd = frechet_feature_distance(&real, &fake, &PooledTrunk(&efr))?;
            let mp = dir.join("metrics.json");
            let mut report = eval_report(&mp, &ck, cfg)?;
            report.c_mean = Some(suite.mean);
            report.per_model_scores.insert("eval-FR".into(), json!(suite.mean));
            report.per_model_scores.insert("train-FR".into(), json!(suite_train.mean));
            report.per_model_scores.insert("frechet_eval_fr_trunk".into(), json!(fd));
            report.write_json(&mp)?;
            let mut outs = vec![mp];
            let cp = dir.join("recon_scores.csv");
            let mut csv = String::from("index,identity_id,score\n");
            for s in &suite.scores {
                csv.push_str(&format!("{},{},{}\n", s.index, s.identity_id, s.score));
            }
            fs::write(&cp, csv).map_err(Error::io(&cp))?;
            outs.push(cp);
            let m = write_manifest(&dir, cmd, cfg, &[ck, tp, ep], &outs)?;
            Ok(Outcome {
                summary: format!("C_mean (eval-FR) {:.4}, train-FR {:.4}, Fréchet {:.4}", suite.mean, suite_train.mean, fd),
                manifest: m,
            })
        }
        Cmd::EvalAttack(arg) => {
            let (test, _, _) = dataset(cfg, Split::Test)?;
            let (model, ck) = load_model(cfg, arg)?;
            let (tfr, tp) = load_fr(cfg, FrRole::Train)?;
            let (efr, ep) = load_fr(cfg, FrRole::Eval)?;
            let dir = l.out.join("eval");
            let _lock = DirLock::acquire(&dir)?;
            let tau = calibrated_tau(cfg, &efr, &test)?;
            let pairs = attack_pairs(cfg, &test)?;
            let ctx = AttackContext::new(&model, &tfr, &efr, &test)?;
            let rep = attack_success_rate(&ctx, &pairs, tau)?;
            let mp = dir.join("metrics.json");
            let mut report = eval_report(&mp, &ck, cfg)?;
            report.tau = Some(tau);
            report.asr = Some(rep.asr);
            report.write_json(&mp)?;
            let cp = dir.join("attack_pairs.csv");
            let mut csv = String::from("attacker,target,score_target,score_attacker,success\n");
            for o in &rep.outcomes {
                csv.push_str(&format!("{},{},{},{},{}\n", o.attacker, o.target, o.score_target, o.score_attacker, o.success));
            }
            fs::write(&cp, csv).map_err(Error::io(&cp))?;
            let m = write_manifest(&dir, cmd, cfg, &[ck, tp, ep], &[mp, cp])?;
            Ok(Outcome { summary: format!("tau {tau:.4} (FAR {}), ASR {:.3} over {} pairs", cfg.far_target, rep.asr, pairs.len()), manifest: m })
        }
        Cmd::EvalSweep(arg) => {
            let (test, class_names, _) = dataset(cfg, Split::Test)?;
            let (model, ck) = load_model(cfg, arg)?;
            let (tfr, tp) = load_fr(cfg, FrRole::Train)?;
            let (efr, ep) = load_fr(cfg, FrRole::Eval)?;
            let dir = l.out.join("eval");
            let _lock = DirLock::acquire(&dir)?;
            let tau = calibrated_tau(cfg, &efr, &test)?;
            let pairs = attack_pairs(cfg, &test)?;
            let ctx = AttackContext::new(&model, &tfr, &efr, &test)?;
            let rows = style_swap_sweep(&ctx, &pairs, tau, &class_names, &tfr)?;
            let mp = dir.join("metrics.json");
            let mut report = eval_report(&mp, &ck, cfg)?;
            report.tau = Some(tau);
            report.sweep = rows.clone();
            report.write_json(&mp)?;
            let cp = dir.join("sweep.csv");
            write_sweep_csv(&cp, &rows)?;
            let m = write_manifest(&dir, cmd, cfg, &[ck, tp, ep], &[mp, cp])?;
            let table: Vec<String> =
                rows.iter().map(|r| format!("{} asr={:.3} prc={:.4}", r.swap_set, r.asr, r.perceptual_distance)).collect();
            Ok(Outcome { summary: table.join("; "), manifest: m })
        }
        Cmd::AttnMaps(o) => {
            let (test, class_names, _) = dataset(cfg, Split::Test)?;
            let (model, ck) = load_model(cfg, &o.model)?;
            let (tfr, tp) = load_fr(cfg, FrRole::Train)?;
            let rec = pick(&test, o.index, "record")?;
            let dir = l.out.join("attn");
            let _lock = DirLock::acquire(&dir)?;
            let mask = one_hot(&rec.mask, model.classes())?;
            let emb = embed_records(&tfr, std::slice::from_ref(rec))?.remove(0);
            let tokens = model.tokens(&model.extract_styles(&rec.image, &mask)?, &emb)?;
            let out = model.generate(&model.embed_mask(&mask)?, &tokens)?;
            let mut outs = vec![];
            write_image(&dir, "output.png", &out.image, &mut outs)?;
            let mut token_names = class_names.clone();
            token_names.push("identity".into());
            let mut blocks = Vec::new();
            for (b, a) in out.attention.iter().enumerate() {
                let side = (a.dim(0) as f64).sqrt().round() as usize;
                let maps = (0..token_names.len())
                    .map(|t| attention_heatmaps(&out, t, b).map(|m| m.data().to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                blocks.push(AttentionBlock { side, maps });
            }
            let dump = AttentionDump { image: "output.png".into(), resolution: model.resolution(), tokens: token_names, blocks };
            write_json(&dir, "attention.json", &dump, &mut outs)?;
            let m = write_manifest(&dir, cmd, cfg, &[ck, tp], &outs)?;
            Ok(Outcome { summary: format!("attention maps for {} blocks in {}", dump.blocks.len(), dir.display()), manifest: m })
        }
        Cmd::Plot => {
            let dir = l.out.join("plots");
            let sweep = l.out.join("eval").join("sweep.csv");
            let metrics = l.synth_dir.join("metrics.jsonl");
            let attn = l.out.join("attn").join("attention.json");
            if !sweep.exists() && !metrics.exists() && !attn.exists() {
                return Err(Error::MissingPrerequisite { path: sweep, producer: "eval-sweep" });
            }
            let _lock = DirLock::acquire(&dir)?;
            let (mut ins, mut outs) = (vec![], vec![]);
            if sweep.exists() {
                let rows = crate::evaluation::read_sweep_csv(&sweep)?;
                let p = dir.join("sweep.svg");
                fs::write(&p, sweep_chart_svg(&rows)).map_err(Error::io(&p))?;
                ins.push(sweep);
                outs.push(p);
            }
            if metrics.exists() {
                let recs = read_metrics(&metrics)?;
                let p = dir.join("losses.svg");
                fs::write(&p, loss_chart_svg(&recs)).map_err(Error::io(&p))?;
                ins.push(metrics);
                outs.push(p);
            }
            if attn.exists() {
                outs.extend(attention_overlays(&attn, &dir)?);
                ins.push(attn);
            }
            let m = write_manifest(&dir, cmd, cfg, &ins, &outs)?;
            Ok(Outcome { summary: format!("wrote {} plot files to {}", outs.len(), dir.display()), manifest: m })
        }
    }
}

/// Reconstructions are always conditioned with train-FR embeddings.
fn efr_train_pair(tfr: &FREmbedder) -> &FREmbedder {
    tfr
}

fn parse_swap(spec: &str, class_names: &[String]) -> Result<Vec<usize>> {
    if let Ok(set) = spec.parse::<SwapSet>() {
        return set.classes(class_names);
    }
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            class_names
                .iter()
                .position(|c| c.eq_ignore_ascii_case(s))
                .ok_or_else(|| Error::Validation(format!("unknown class label '{s}'; classes are {}", class_names.join(", "))))
        })
        .collect()
}
