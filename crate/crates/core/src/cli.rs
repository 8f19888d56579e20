//! Command-line entry point. `run` returns the process exit code:
//! 0 on success, 1 on invalid input, 2 on runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::{Profile, RunConfig};
use crate::dataset::{load_dataset, read_mask, save_dataset, write_mask, DomainDataset, DomainRole};
use crate::error::{Error, Result};
use crate::eval::{tabulate_ablation, AblationMode, AblationTable};
use crate::plot;
use crate::synth::generate_domain;
use crate::trainer::{
    ablate, adapt_student, checkpoint_hash, dump_features, evaluate_model, generate_pseudo_labels, pseudo_label_hash,
    sweep, train_teacher, DataSource, EpochLoss, RunManifest, SweepParam,
};

type F = f32;

#[derive(Parser, Debug)]
#[command(name = "gahcda", version, about = "Gaze-assisted teacher-student domain adaptation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML or JSON config file layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting profile: paper or desk.
    #[arg(long, default_value = "paper")]
    profile: String,
    /// Override one config key, e.g. `--set optimizer.lr=3e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; replaces `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset root holding `source/` and `target/`; synthesized from the
    /// `synth` section when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic source and target datasets.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher on labelled source data.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Threshold teacher predictions on the target domain.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Adapt a student on the target domain with gaze guidance.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher: PathBuf,
        /// Directory of pseudo-label PNGs; recomputed from the teacher when omitted.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Score a checkpoint on one domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// source or target.
        #[arg(long, default_value = "target")]
        role: String,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Compare no-DA, GAA-only, GBL-only and full adaptation over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// `all` or a comma list of no-DA, GAA-only, GBL-only, full.
        #[arg(long, default_value = "all")]
        modes: String,
        /// Number of seeds, starting at `seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Adapt once per value of lambda_gaa or lambda_gb.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// lambda_gaa or lambda_gb.
        #[arg(long)]
        param: String,
        #[arg(long, default_value = "0,0.25,0.5,1.0,2.0")]
        values: String,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Render loss curves and ablation bars from a run directory.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Run directory to scan; defaults to the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Write bottleneck and last decoder feature maps for one image.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// source or target.
        #[arg(long, default_value = "target")]
        role: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Manifest for subcommands that have no training run of their own.
#[derive(Serialize)]
struct CommandManifest {
    command: String,
    config: RunConfig,
    config_hash: String,
    outputs: Vec<String>,
    hashes: BTreeMap<String, String>,
}

impl CommandManifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        CommandManifest {
            command: command.into(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            outputs: Vec::new(),
            hashes: BTreeMap::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}_manifest.json", self.command));
        write_text(&path, &serde_json::to_string_pretty(self).expect("manifest serializes"))
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn config_help() -> String {
    let paper = RunConfig::default().flattened();
    let desk: BTreeMap<String, String> = RunConfig::desk().flattened().into_iter().collect();
    let mut out = String::from("Config keys (paper default; desk value where it differs):\n");
    for (k, v) in paper {
        match desk.get(&k).filter(|d| **d != v) {
            Some(d) => out.push_str(&format!("  {k} = {v}  (desk: {d})\n")),
            None => out.push_str(&format!("  {k} = {v}\n")),
        }
    }
    out
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let profile: Profile = common.profile.parse()?;
    let base = RunConfig::profile(profile);
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p, &base)?,
        None => base,
    };
    cfg = cfg.with_overrides(&common.set)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok((cfg, out))
}

fn parse_role(s: &str) -> Result<DomainRole> {
    match s {
        "source" => Ok(DomainRole::Source),
        "target" => Ok(DomainRole::Target),
        other => Err(Error::InvalidConfig(format!("role must be source or target, got {other:?}"))),
    }
}

fn load_domain(data: &DataArg, cfg: &RunConfig, role: DomainRole) -> Result<DomainDataset<F>> {
    match &data.data {
        Some(root) => {
            let sub = match role {
                DomainRole::Source => "source",
                DomainRole::Target => "target",
            };
            load_dataset(&root.join(sub), role)
        }
        None => generate_domain(&cfg.synth, role),
    }
}

fn load_both(data: &DataArg, cfg: &RunConfig) -> Result<Option<(DomainDataset<F>, DomainDataset<F>)>> {
    Ok(match &data.data {
        Some(_) => Some((load_domain(data, cfg, DomainRole::Source)?, load_domain(data, cfg, DomainRole::Target)?)),
        None => None,
    })
}

fn parse_modes(s: &str) -> Result<Vec<AblationMode>> {
    if s == "all" {
        return Ok(AblationMode::ALL.to_vec());
    }
    s.split(',').map(|m| m.trim().parse()).collect()
}

fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::InvalidConfig(format!("bad sweep value {v:?}: {e}"))))
        .collect()
}

fn collect_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_manifests(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_manifest.json")) {
            out.push(p);
        }
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { common } => {
            let (cfg, out) = resolve(&common)?;
            let mut m = CommandManifest::new("gen-synth", &cfg);
            for role in [DomainRole::Source, DomainRole::Target] {
                let ds: DomainDataset<F> = generate_domain(&cfg.synth, role)?;
                let name = if role == DomainRole::Source { "source" } else { "target" };
                save_dataset(&ds, &out.join(name))?;
                m.outputs.push(name.into());
                m.hashes.insert(name.into(), ds.content_hash());
            }
            m.write(&out)?;
            println!("wrote synthetic datasets to {}", out.display());
        }
        Command::TrainTeacher { common, data } => {
            let (cfg, out) = resolve(&common)?;
            let source = load_domain(&data, &cfg, DomainRole::Source)?;
            let (params, mut manifest) = train_teacher(&source, &cfg)?;
            let ckpt = out.join("teacher.ckpt");
            write_checkpoint(
                &Checkpoint {
                    params,
                    aux: Vec::new(),
                },
                &ckpt,
            )?;
            manifest.checkpoint = Some(ckpt.display().to_string());
            manifest.write(&out, "teacher_manifest")?;
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!("teacher checkpoint {} (sha256 {})", ckpt.display(), manifest.checkpoint_hash);
        }
        Command::PseudoLabel { common, data, teacher } => {
            let (cfg, out) = resolve(&common)?;
            let target = load_domain(&data, &cfg, DomainRole::Target)?;
            let t = read_checkpoint::<F>(&teacher)?.params;
            let masks = generate_pseudo_labels(&t, &target, cfg.threshold)?;
            let dir = out.join("pseudo");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let ids: Vec<String> = (0..target.len()).map(|i| target.id(i).to_string()).collect();
            for (id, m) in ids.iter().zip(&masks) {
                write_mask(m, &dir.join(format!("{id}.png")))?;
            }
            let mut m = CommandManifest::new("pseudo-label", &cfg);
            m.outputs.push("pseudo".into());
            m.hashes.insert("teacher".into(), checkpoint_hash(&t, &[]));
            m.hashes.insert("pseudo_labels".into(), pseudo_label_hash(&ids, &masks));
            let empty: Vec<&str> = ids.iter().zip(&masks).filter(|(_, m)| m.is_empty()).map(|(i, _)| i.as_str()).collect();
            if !empty.is_empty() {
                m.hashes.insert("empty_pseudo_labels".into(), empty.join(";"));
                eprintln!("warning: {} empty pseudo-labels", empty.len());
            }
            m.write(&out)?;
            println!("wrote {} pseudo-labels to {}", masks.len(), dir.display());
        }
        Command::Adapt {
            common,
            data,
            teacher,
            pseudo,
        } => {
            let (cfg, out) = resolve(&common)?;
            let target = load_domain(&data, &cfg, DomainRole::Target)?;
            let t = read_checkpoint::<F>(&teacher)?.params;
            let masks = match pseudo {
                Some(dir) => (0..target.len())
                    .map(|i| read_mask(&dir.join(format!("{}.png", target.id(i)))))
                    .collect::<Result<Vec<_>>>()?,
                None => generate_pseudo_labels(&t, &target, cfg.threshold)?,
            };
            let mut adapted = adapt_student(&t, &target, &masks, &cfg)?;
            let ckpt = out.join("student.ckpt");
            write_checkpoint(&adapted.checkpoint(), &ckpt)?;
            adapted.manifest.checkpoint = Some(ckpt.display().to_string());
            adapted.manifest.write(&out, "adapt_manifest")?;
            for w in &adapted.manifest.warnings {
                eprintln!("warning: {w}");
            }
            println!("student checkpoint {} (sha256 {})", ckpt.display(), adapted.manifest.checkpoint_hash);
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            role,
            label,
        } => {
            let (cfg, out) = resolve(&common)?;
            let ds = load_domain(&data, &cfg, parse_role(&role)?)?;
            let params = read_checkpoint::<F>(&checkpoint)?.params;
            let mut report = evaluate_model(&params, &ds, cfg.threshold, &label)?;
            report.config_hash = cfg.hash();
            report.write(&out, &label)?;
            let mut m = CommandManifest::new("evaluate", &cfg);
            m.outputs.extend([format!("{label}.csv"), format!("{label}.json")]);
            m.write(&out)?;
            println!(
                "{label}: DSC {:.2} ± {:.2}, ASSD {:.3} ± {:.3} ({} items, {} without ASSD)",
                report.dsc_mean,
                report.dsc_std,
                report.assd_mean,
                report.assd_std,
                report.items.len(),
                report.assd_excluded
            );
        }
        Command::Ablate {
            common,
            data,
            modes,
            seeds,
        } => {
            let (cfg, out) = resolve(&common)?;
            let modes = parse_modes(&modes)?;
            let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let fixed = load_both(&data, &cfg)?;
            let source = match &fixed {
                Some((s, t)) => DataSource::Fixed { source: s, target: t },
                None => DataSource::Synthetic,
            };
            let outcome = ablate(&cfg, &source, &modes, &seed_list)?;
            let mut m = CommandManifest::new("ablate", &cfg);
            for run in &outcome.runs {
                let dir = out.join(format!("seed_{}", run.seed));
                let stem = run.mode.as_str().to_lowercase();
                run.report.write(&dir, &format!("{stem}_report"))?;
                if let Some(man) = &run.manifest {
                    man.write(&dir, &format!("{stem}_manifest"))?;
                }
                m.hashes.insert(format!("seed_{}/{stem}", run.seed), run.report.checkpoint_hash.clone().unwrap_or_default());
            }
            for (man, seed) in outcome.teacher_manifests.iter().zip(&seed_list) {
                man.write(&out.join(format!("seed_{seed}")), "teacher_manifest")?;
            }
            if modes.len() == AblationMode::ALL.len() {
                let table = tabulate_ablation(&outcome.labelled())?;
                table.write(&out)?;
                write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
                m.outputs.extend(["ablation.csv".into(), "ablation.svg".into(), "ablation.json".into()]);
                print!("{}", table.to_csv());
            } else {
                for run in &outcome.runs {
                    println!("seed {} {}: DSC {:.2}", run.seed, run.mode, run.report.dsc_mean);
                }
            }
            m.write(&out)?;
        }
        Command::Sweep {
            common,
            data,
            param,
            values,
            seeds,
        } => {
            let (cfg, out) = resolve(&common)?;
            let param: SweepParam = param.parse()?;
            let values = parse_values(&values)?;
            let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let fixed = load_both(&data, &cfg)?;
            let source = match &fixed {
                Some((s, t)) => DataSource::Fixed { source: s, target: t },
                None => DataSource::Synthetic,
            };
            let points = sweep(&cfg, &source, param, &values, &seed_list)?;
            let mut csv = String::from("param,value,seed,dsc_mean,assd_mean\n");
            for p in &points {
                csv.push_str(&format!("{},{},{},{:.6},{:.6}\n", param.as_str(), p.value, p.seed, p.dsc_mean, p.assd_mean));
            }
            write_text(&out.join("sweep.csv"), &csv)?;
            let series: Vec<(f64, f64)> = values
                .iter()
                .map(|&v| {
                    let d: Vec<f64> = points.iter().filter(|p| p.value == v).map(|p| p.dsc_mean).collect();
                    (v, d.iter().sum::<f64>() / d.len() as f64)
                })
                .collect();
            let svg = plot::line_chart(
                &format!("Target DSC vs {}", param.as_str()),
                param.as_str(),
                "mean DSC (%)",
                &[("DSC".into(), series.clone())],
            );
            write_text(&out.join("sweep.svg"), &svg)?;
            let mut m = CommandManifest::new("sweep", &cfg);
            m.outputs.extend(["sweep.csv".into(), "sweep.svg".into()]);
            m.write(&out)?;
            for (v, d) in series {
                println!("{}={v}: mean DSC {d:.2}", param.as_str());
            }
        }
        Command::Plot { common, run } => {
            let (cfg, out) = resolve(&common)?;
            let dir = run.unwrap_or_else(|| out.clone());
            let mut found = Vec::new();
            collect_manifests(&dir, &mut found)?;
            let mut m = CommandManifest::new("plot", &cfg);
            for path in found {
                let Ok(man) = RunManifest::read(&path) else { continue };
                if man.loss_curve.is_empty() {
                    continue;
                }
                let curve = |f: fn(&EpochLoss) -> f64| -> Vec<(f64, f64)> { man.loss_curve.iter().map(|e| (e.epoch as f64, f(e))).collect() };
                let series = vec![
                    ("l_gaa".to_string(), curve(|e| e.l_gaa)),
                    ("l_gb".to_string(), curve(|e| e.l_gb)),
                    ("l_dice".to_string(), curve(|e| e.l_dice)),
                    ("l_ce".to_string(), curve(|e| e.l_ce)),
                    ("total".to_string(), curve(|e| e.total)),
                ];
                let svg = plot::line_chart(&format!("{} loss", man.kind), "epoch", "loss", &series);
                let target = path.with_file_name(
                    path.file_name().and_then(|n| n.to_str()).unwrap_or("run").replace("_manifest.json", "_loss.svg"),
                );
                write_text(&target, &svg)?;
                m.outputs.push(target.display().to_string());
            }
            let ablation = dir.join("ablation.json");
            if ablation.is_file() {
                let text = fs::read_to_string(&ablation).map_err(|e| Error::io(&ablation, e))?;
                let table: AblationTable = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
                let svg = dir.join("ablation.svg");
                write_text(&svg, &table.to_svg())?;
                m.outputs.push(svg.display().to_string());
            }
            m.write(&out)?;
            println!("rendered {} charts", m.outputs.len());
        }
        Command::DumpFeatures {
            common,
            data,
            checkpoint,
            role,
            index,
        } => {
            let (cfg, out) = resolve(&common)?;
            let ds = load_domain(&data, &cfg, parse_role(&role)?)?;
            if index >= ds.len() {
                return Err(Error::InvalidConfig(format!("index {index} out of range for {} items", ds.len())));
            }
            let params = read_checkpoint::<F>(&checkpoint)?.params;
            let path = out.join(format!("features_{}.gzf", ds.id(index)));
            dump_features(&params, ds.image(index), &path)?;
            let mut m = CommandManifest::new("dump-features", &cfg);
            m.outputs.push(path.display().to_string());
            m.hashes.insert("checkpoint".into(), checkpoint_hash(&params, &[]));
            m.write(&out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let help = config_help();
    let mut command = Cli::command();
    let names: Vec<String> = command.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let h = help.clone();
        command = command.mut_subcommand(name, move |s| s.after_help(h));
    }
    let matches = match command.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
