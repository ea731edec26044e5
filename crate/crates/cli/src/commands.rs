use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use dynslim::data::{load_wav, save_wav, synth_corpus, Corpus, SynthSpec};
use dynslim::eval::{self, Mode};
use dynslim::metrics::{count_macs, pareto_front};
use dynslim::training::{self, Setup, Stage, TrainState, LAST_DIR};
use dynslim::{Demucs, Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command, ModeArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = Some(out.clone());
    }
    match cli.command {
        Command::SynthData { count, seconds } => {
            cfg.synth.count = count.unwrap_or(cfg.synth.count);
            cfg.synth.seconds = seconds.unwrap_or(cfg.synth.seconds);
            cfg.validate()?;
            synth_data(&cfg)
        }
        Command::Train { stage, data, init, resume, epochs } => {
            if let Some(d) = data {
                cfg.paths.data = Some(d);
            }
            if let Some(n) = epochs {
                match stage {
                    Stage::Slim => cfg.slim.epochs = n,
                    Stage::Dyn => cfg.dynamic.epochs = n,
                }
            }
            cfg.validate()?;
            train(&cfg, stage, init.as_deref(), resume)
        }
        Command::Infer { checkpoint, input, mode, trace } => {
            infer(&checkpoint, &input, mode, cli.out.as_deref(), trace.as_deref())
        }
        Command::Eval { checkpoint, data, mode } => {
            let data = data.or(cfg.paths.data.clone()).ok_or_else(|| need("--data"))?;
            evaluate(&checkpoint, &data, mode, cli.out.as_deref())
        }
        Command::Pareto { inputs } => pareto(&inputs, cli.out.as_deref()),
        Command::Macs { checkpoint, uf, trace, csv } => {
            let model_cfg = match checkpoint {
                Some(dir) => Demucs::load(&dir)?.config,
                None => {
                    cfg.validate()?;
                    cfg.model
                }
            };
            macs(&model_cfg, uf, trace.as_deref(), csv, cli.out.as_deref())
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn need(flag: &str) -> Error {
    Error::Config(format!("{flag} is required (or set it in the config file)"))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn synth_data(cfg: &RunConfig) -> Result<()> {
    let out = cfg.paths.out.as_deref().ok_or_else(|| need("--out"))?;
    let mut mixture = cfg.mixture.clone();
    mixture.seed = cfg.seed;
    let corpus = synth_corpus(&SynthSpec {
        count: cfg.synth.count,
        seconds: cfg.synth.seconds,
        mixture,
        prefix: "utt".into(),
    })?;
    corpus.save(out)?;
    eprintln!("wrote {} utterances to {}", corpus.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, stage: Stage, init: Option<&Path>, resume: bool) -> Result<()> {
    let out = cfg.paths.out.as_deref().ok_or_else(|| need("--out"))?;
    let data = cfg.paths.data.as_deref().ok_or_else(|| need("--data"))?;
    // Checked before loading any data.
    let resumed = if resume {
        let (model, state) = TrainState::load(&out.join(LAST_DIR))?;
        if state.stage != stage {
            return Err(Error::Config(format!(
                "{} holds a {} run, not {}",
                out.display(),
                state.stage.name(),
                stage.name()
            )));
        }
        Some((model, state))
    } else {
        None
    };
    if stage == Stage::Dyn && resumed.is_none() && init.is_none() {
        return Err(Error::Config("stage dyn needs a stage-1 checkpoint (--init DIR)".into()));
    }
    let corpus = Corpus::load(data)?;
    if corpus.len() <= cfg.validation {
        return Err(Error::Data(format!(
            "corpus has {} utterances, need more than the {} held out for validation",
            corpus.len(),
            cfg.validation
        )));
    }
    let (train_set, val_set) = corpus.split_tail(cfg.validation);
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("config.{}.toml", stage.name())), cfg.to_toml())?;
    let train_cfg = match stage {
        Stage::Slim => &cfg.slim,
        Stage::Dyn => &cfg.dynamic,
    };
    let setup = Setup {
        train: train_cfg,
        loss: &cfg.loss,
        mixture: &cfg.mixture,
        out: Some(out),
    };
    let mut report = |r: &training::EpochRecord| eprintln!("{}", r.to_log_line());
    let (model, state) = match (resumed, stage) {
        (Some((mut model, state)), _) => {
            let s = training::train(&mut model, stage, &train_set, &val_set, &setup, Some(state), cfg.seed, &mut report)?;
            (model, s)
        }
        (None, Stage::Slim) => {
            let mut model = Demucs::new(cfg.model.clone(), cfg.seed)?;
            let s = training::stage1_train(&mut model, &train_set, &val_set, &setup, cfg.seed, &mut report)?;
            (model, s)
        }
        (None, Stage::Dyn) => {
            let mut model = Demucs::load(init.expect("checked above"))?;
            let s = training::stage2_train(&mut model, &train_set, &val_set, &setup, cfg.seed, &mut report)?;
            (model, s)
        }
    };
    model.save(&out.join(training::BEST_DIR))?;
    eprintln!(
        "finished {} after {} epochs (best validation loss {:.6}{})",
        stage.name(),
        state.epoch,
        state.best_val,
        if state.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

fn resolve_mode(model: &Demucs, mode: ModeArgs) -> Result<Mode> {
    match mode.uf {
        Some(uf) => Ok(Mode::Static(model.config.uset.index_of(uf)?)),
        None => {
            model.router().map_err(|_| Error::Config("--route needs a checkpoint with a router".into()))?;
            Ok(Mode::Route)
        }
    }
}

fn infer(checkpoint: &Path, input: &Path, mode: ModeArgs, out: Option<&Path>, trace: Option<&Path>) -> Result<()> {
    let out = out.ok_or_else(|| need("--out"))?;
    let model = Demucs::load(checkpoint)?;
    let mode = resolve_mode(&model, mode)?;
    if trace.is_some() && mode != Mode::Route {
        return Err(Error::Config("--trace needs --route".into()));
    }
    let x = load_wav(input)?;
    let (y, routing) = eval::enhance(&model, &x, mode)?;
    save_wav(out, &y)?;
    if let (Some(path), Some(t)) = (trace, routing.as_ref()) {
        t.write_csv(output(Some(path))?, &model.config.uset)?;
    }
    if let Some(t) = routing {
        eprintln!("{} router frames, mean utilization {:.4}", t.frames(), t.mean_utilization);
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, data: &Path, mode: ModeArgs, out: Option<&Path>) -> Result<()> {
    let model = Demucs::load(checkpoint)?;
    let mode = resolve_mode(&model, mode)?;
    let corpus = Corpus::load(data)?;
    let rows = eval::evaluate(&model, &corpus, mode)?;
    eval::write_csv(&rows, output(out)?)
}

fn pareto(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut points = Vec::new();
    for p in inputs {
        let (_, mean) = eval::read_csv(File::open(p)?)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        points.push((label, mean));
    }
    let front = pareto_front(&points.iter().map(|(_, m)| (m.macs, m.si_sdr_out)).collect::<Vec<_>>());
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["label", "macs", "mean_utilization", "si_sdr_out", "improvement", "pareto"])
        .map_err(csv_err)?;
    for ((label, m), on_front) in points.iter().zip(front) {
        w.write_record([
            label.clone(),
            m.macs.to_string(),
            m.mean_utilization.to_string(),
            m.si_sdr_out.to_string(),
            m.improvement.to_string(),
            on_front.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Decision column of a trace written by `infer --trace`.
fn read_decisions(path: &Path, choices: usize) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let col = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .position(|h| h == "decision")
        .ok_or_else(|| Error::Data(format!("{}: no `decision` column", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let d: usize = rec[col]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad decision `{}`", path.display(), &rec[col])))?;
        if d >= choices {
            return Err(Error::Data(format!("{}: decision {d} out of range", path.display())));
        }
        out.push(d);
    }
    Ok(out)
}

fn macs(
    cfg: &dynslim::ModelConfig,
    uf: Option<f64>,
    trace: Option<&Path>,
    csv: bool,
    out: Option<&Path>,
) -> Result<()> {
    let report = count_macs(cfg)?;
    let mut w = output(out)?;
    if let Some(uf) = uf {
        let j = cfg.uset.index_of(uf)?;
        writeln!(w, "uf={uf} backbone_macs={:.2} router_macs={:.2}", report.total(j), report.router)?;
    } else if let Some(path) = trace {
        let decisions = read_decisions(path, cfg.uset.len())?;
        let backbone = report.mean_for_decisions(&decisions);
        let occ = dynslim::router::occurrence(&decisions, cfg.uset.len());
        let util: f64 = occ.iter().zip(cfg.uset.values()).map(|(o, u)| o * u).sum();
        writeln!(
            w,
            "frames={} mean_utilization={util:.4} backbone_macs={backbone:.2} router_macs={:.2} total_macs={:.2}",
            decisions.len(),
            report.router,
            backbone + report.router
        )?;
    } else if csv {
        report.write_csv(&mut w)?;
    } else {
        write!(w, "{}", report.to_table())?;
    }
    w.flush()?;
    Ok(())
}
