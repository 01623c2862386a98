use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use p2es::config::RunConfig;
use p2es::diffusion::forward_dualnoise;
use p2es::eval::{report, segment_entropy, table_csv};
use p2es::groupfinder::{permutation_accuracy, GroupFinder};
use p2es::model::denoiser::Denoiser;
use p2es::model::generate::generate;
use p2es::model::train::{prepare_examples, train, write_history_csv};
use p2es::model::Checkpoint;
use p2es::qrs::segment_mask;
use p2es::signals::io::{read_cohort, read_segments, write_cohort, write_segments, COHORT_MAGIC};
use p2es::signals::synth::{split_by_subject, synth_cohort};
use p2es::signals::{lead_names, PairedRecord, SignalSegment};
use p2es::spectral::{spectral_entropy, time_entropy};

use crate::{Cli, Command};

pub const TRAIN_COHORT: &str = "cohort_train.bin";
pub const TEST_COHORT: &str = "cohort_test.bin";
pub const GROUPFINDER: &str = "groupfinder.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const GENERATED: &str = "generated.csv";
pub const METRICS: &str = "metrics.json";
pub const TABLE: &str = "table2.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact {path}: run `p2es {stage}` first")]
    Missing { stage: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] p2es::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        require(self.path(name), stage)
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() { Ok(path) } else { Err(CliError::Missing { stage, path }) }
}

fn context(cli: &Cli) -> Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&require(p.clone(), "config")?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.steps {
        cfg.schedule.steps = t;
    }
    if let Some(s) = cli.ddim {
        cfg.ddim.steps = s;
    }
    if let Some(e) = cli.eta {
        cfg.ddim.eta = e;
    }
    if let Command::Train { epochs: Some(e) } = cli.command {
        cfg.training.epochs = e;
    }
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.data_dir());
    fs::create_dir_all(&out)?;
    Ok(Ctx { cfg, out })
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    let ctx = context(cli)?;
    match &cli.command {
        Command::Synth => synth(&ctx),
        Command::Cluster => cluster(&ctx),
        Command::Train { .. } => train_cmd(&ctx),
        Command::Generate { input, checkpoint, output } => {
            generate_cmd(&ctx, input, checkpoint.as_deref(), output.as_deref())
        }
        Command::Evaluate { generated, reference } => evaluate(&ctx, generated.as_deref(), reference.as_deref()),
        Command::Entropy { input } => entropy(input),
        Command::Plotdata { generated, reference, index } => {
            plotdata(&ctx, generated.as_deref(), reference.as_deref(), *index)
        }
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn synth(ctx: &Ctx) -> Result<()> {
    let cohort = synth_cohort(&ctx.cfg.cohort, ctx.cfg.seed)?;
    let (tr, te) = split_by_subject(&cohort, ctx.cfg.train_fraction, ctx.cfg.seed);
    write_cohort(&tr, &ctx.path(TRAIN_COHORT))?;
    write_cohort(&te, &ctx.path(TEST_COHORT))?;
    let subjects = |r: &[PairedRecord]| {
        r.iter().map(|x| x.subject_id()).collect::<std::collections::BTreeSet<_>>().len()
    };
    emit(json!({
        "command": "synth",
        "train_records": tr.len(),
        "test_records": te.len(),
        "train_subjects": subjects(&tr),
        "test_subjects": subjects(&te),
    }));
    Ok(())
}

fn cluster(ctx: &Ctx) -> Result<()> {
    let records = read_cohort(&ctx.require(TRAIN_COHORT, "synth")?)?;
    let finder = GroupFinder::fit(&records, &ctx.cfg.groupfinder, ctx.cfg.seed)?;
    fs::write(ctx.path(GROUPFINDER), serde_json::to_string(&finder).map_err(p2es::Error::from)?)?;

    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for (id, &k) in &finder.subject_labels {
        if let Some(t) = records.iter().find(|r| r.subject_id() == id).and_then(|r| r.truth.as_ref()) {
            labels.push(k);
            truth.push(t.group);
        }
    }
    let accuracy = (!truth.is_empty()).then(|| permutation_accuracy(&labels, &truth));
    emit(json!({
        "command": "cluster",
        "k": finder.clusters.k,
        "silhouette_by_k": finder.clusters.silhouette_by_k,
        "subject_accuracy": accuracy,
    }));
    Ok(())
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let records = read_cohort(&ctx.require(TRAIN_COHORT, "synth")?)?;
    let finder: GroupFinder = serde_json::from_str(&fs::read_to_string(ctx.require(GROUPFINDER, "cluster")?)?)
        .map_err(p2es::Error::from)?;
    let tcfg = ctx.cfg.train_config();
    let schedule = ctx.cfg.schedule()?;
    let examples = prepare_examples(&records, &finder, tcfg.qrs_half_width_ms)?;
    let den = Denoiser::new(&ctx.cfg.denoiser_config(), ctx.cfg.seed)?;
    let rate = records.first().map_or(ctx.cfg.cohort.preprocess.rate, |r| r.ecg.rate);
    let ckpt = |denoiser: Denoiser| Checkpoint {
        denoiser,
        schedule: schedule.clone(),
        finder: finder.clone(),
        train: tcfg.clone(),
        rate,
    };
    let out = match train(&examples, den.clone(), &schedule, &tcfg, ctx.cfg.seed) {
        Ok(o) => o,
        Err(p2es::Error::Diverged { epoch, last_finite }) => {
            let mut d = den;
            d.store.set_values(last_finite)?;
            let path = ctx.path("model.last_finite.ckpt");
            ckpt(d).save(&path)?;
            return Err(CliError::Invalid(format!(
                "training diverged at epoch {epoch}; last finite parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    ckpt(out.denoiser).save(&ctx.path(CHECKPOINT))?;
    let mut f = std::io::BufWriter::new(fs::File::create(ctx.path(HISTORY))?);
    write_history_csv(&out.history, &mut f)?;
    f.flush()?;
    let first = out.history.first().map(|r| r.total);
    let last = out.history.last().map(|r| r.total);
    emit(json!({
        "command": "train",
        "epochs": tcfg.epochs,
        "examples": examples.len(),
        "initial_total": first,
        "final_total": last,
        "checkpoint": ctx.path(CHECKPOINT),
    }));
    Ok(())
}

/// PPG windows plus, for cohort files, the matching reference ECG.
struct Signals {
    ppg: Vec<SignalSegment>,
    ecg: Option<Vec<SignalSegment>>,
}

fn is_cohort(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path)?;
    use std::io::Read;
    Ok(f.read_exact(&mut head).is_ok() && &head == COHORT_MAGIC)
}

fn load_signals(path: &Path) -> Result<Signals> {
    let path = require(path.to_path_buf(), "synth")?;
    if is_cohort(&path)? {
        let records = read_cohort(&path)?;
        let (ppg, ecg) = records.into_iter().map(|r| (r.ppg, r.ecg)).unzip();
        Ok(Signals { ppg, ecg: Some(ecg) })
    } else {
        Ok(Signals { ppg: read_segments(&path)?, ecg: None })
    }
}

/// ECG segments from a cohort file (its ECG side) or a segment file.
fn load_ecg(path: &Path) -> Result<Vec<SignalSegment>> {
    let s = load_signals(path)?;
    Ok(s.ecg.unwrap_or(s.ppg))
}

fn generate_cmd(ctx: &Ctx, input: &Path, checkpoint: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let ckpt_path = match checkpoint {
        Some(p) => require(p.to_path_buf(), "train")?,
        None => ctx.require(CHECKPOINT, "train")?,
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ppg = load_signals(input)?.ppg;
    if let Some(bad) = ppg.iter().find(|s| s.channels() != 1) {
        return Err(CliError::Invalid(format!(
            "input segment for {} has {} channels; generation needs single-channel PPG",
            bad.subject_id,
            bad.channels()
        )));
    }
    let mut cfg = ctx.cfg.clone();
    cfg.schedule.steps = ckpt.schedule.steps;
    let plan = cfg.plan()?;
    let ablation = ckpt.train.ablation;
    let seed = ctx.cfg.seed;
    let results: std::result::Result<Vec<(SignalSegment, usize)>, p2es::Error> = ppg
        .par_iter()
        .enumerate()
        .map(|(i, p)| generate(p, &ckpt.finder, &ckpt.denoiser, &ckpt.schedule, &plan, ablation, seed.wrapping_add(i as u64)))
        .collect();
    let results = results?;
    let out_path = output.map_or_else(|| ctx.path(GENERATED), Path::to_path_buf);
    let (ecg, clusters): (Vec<SignalSegment>, Vec<usize>) = results.into_iter().unzip();
    write_segments(&ecg, &out_path)?;
    emit(json!({
        "command": "generate",
        "segments": ecg.len(),
        "clusters": clusters,
        "ddim_steps": plan.timesteps.len(),
        "output": out_path,
    }));
    Ok(())
}

fn evaluate(ctx: &Ctx, generated: Option<&Path>, reference: Option<&Path>) -> Result<()> {
    let gen_path = match generated {
        Some(p) => require(p.to_path_buf(), "generate")?,
        None => ctx.require(GENERATED, "generate")?,
    };
    let ref_path = match reference {
        Some(p) => p.to_path_buf(),
        None => ctx.require(TEST_COHORT, "synth")?,
    };
    let gen = load_ecg(&gen_path)?;
    let gt = load_ecg(&ref_path)?;
    let r = report(&gen, &gt)?;
    fs::write(ctx.path(METRICS), serde_json::to_string_pretty(&r).map_err(p2es::Error::from)?)?;
    let table = table_csv(&r);
    fs::write(ctx.path(TABLE), &table)?;
    print!("{table}");
    Ok(())
}

fn entropy(input: &Path) -> Result<()> {
    let segments = load_ecg(input)?;
    let mut out = String::from("segment,subject_id,channel,te,se\n");
    for (i, s) in segments.iter().enumerate() {
        for (name, ch) in s.channel_names.iter().zip(&s.samples) {
            let te = time_entropy(ch, p2es::eval::ENTROPY_BINS)?;
            let se = spectral_entropy(ch)?;
            out.push_str(&format!("{i},{},{name},{te:.9},{se:.9}\n", s.subject_id));
        }
    }
    print!("{out}");
    Ok(())
}

fn plotdata(ctx: &Ctx, generated: Option<&Path>, reference: Option<&Path>, index: usize) -> Result<()> {
    let gen_path = match generated {
        Some(p) => require(p.to_path_buf(), "generate")?,
        None => ctx.require(GENERATED, "generate")?,
    };
    let ref_path = match reference {
        Some(p) => p.to_path_buf(),
        None => ctx.require(TEST_COHORT, "synth")?,
    };
    let gen = load_ecg(&gen_path)?;
    let gt = load_ecg(&ref_path)?;
    let (g, r) = match (gen.get(index), gt.get(index)) {
        (Some(g), Some(r)) => (g, r),
        _ => return Err(CliError::Invalid(format!("index {index} out of range ({} records)", gen.len().min(gt.len())))),
    };
    if g.channels() != 12 || r.channels() != 12 || g.len() != r.len() {
        return Err(CliError::Invalid("overlay needs two 12-lead segments of equal length".into()));
    }

    let names = lead_names();
    let mut overlay = String::from("time");
    for prefix in ["gt", "gen"] {
        for n in &names {
            overlay.push_str(&format!(",{prefix}_{n}"));
        }
    }
    overlay.push('\n');
    for i in 0..r.len() {
        overlay.push_str(&format!("{:.6}", i as f64 / r.rate));
        for s in [r, g] {
            for ch in &s.samples {
                overlay.push_str(&format!(",{:.9}", ch[i]));
            }
        }
        overlay.push('\n');
    }
    let overlay_path = ctx.path(&format!("overlay_{index}.csv"));
    fs::write(&overlay_path, overlay)?;

    let schedule = ctx.cfg.schedule()?;
    let mask = segment_mask(r, ctx.cfg.qrs.half_width_ms)?;
    let mut curve = String::from("t,te,se\n");
    let rows: std::result::Result<Vec<(usize, f64, f64)>, p2es::Error> = (1..=schedule.steps)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
            rng.set_stream(t as u64);
            let x = forward_dualnoise(r, t, &schedule, &ctx.cfg.blur, &mask, &mut rng)?;
            let seg = SignalSegment::ecg12(x.x_t, r.rate, r.subject_id.clone())?;
            let (te, se) = segment_entropy(&seg)?;
            Ok((t, te, se))
        })
        .collect();
    let (mut te0, mut se0) = (0.0, 0.0);
    if let Ok((a, b)) = segment_entropy(r) {
        (te0, se0) = (a, b);
    }
    curve.push_str(&format!("0,{te0:.9},{se0:.9}\n"));
    for (t, te, se) in rows? {
        curve.push_str(&format!("{t},{te:.9},{se:.9}\n"));
    }
    let curve_path = ctx.path(&format!("entropy_curve_{index}.csv"));
    fs::write(&curve_path, curve)?;
    emit(json!({ "command": "plotdata", "overlay": overlay_path, "entropy_curve": curve_path }));
    Ok(())
}
