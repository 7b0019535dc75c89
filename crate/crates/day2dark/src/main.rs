//! Command-line front end: dataset generation, illuminance audits, training,
//! evaluation, plotting and ablation sweeps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use day2dark::checkpoint::Checkpoint;
use day2dark::error::{Day2DarkError, Result};
use day2dark::evalkit;
use day2dark::illuminance;
use day2dark::nn::SgdMomentum;
use day2dark::pipeline::{
    self, epoch_logs_to_csv, sweep_rows_to_csv, TrainConfig, TrainMode, Trained,
};
use day2dark::recognizer::{Recognizer, RecognizerModel};
use day2dark::toybench::{self, BenchConfig};

const USAGE: &str = "day2dark <command> [options]

commands:
  gen-data  --out <dir> [--config <json>] [--print-default-config]
  audit     --data <dir> [--t <thresh>] [--bins <e0,e1,..>] [--out <dir>]
  train     --stage <1|2|e2e> --data <dir> --out <dir> [--config <json>]
            [--preset <desk|full>] [--ckpt <file>]
  eval      --ckpt <file> --data <dir> [--config <json>] [--split <name>]
            [--bins <e0,e1,..>] [--out <dir>]
  plot      --report <dir>
  ablate    --axis <k|lambda|pool|ladder> --data <dir> [--config <json>]
            [--preset <desk|full>] [--out <dir>]
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Flags {
    values: HashMap<String, String>,
    switches: Vec<String>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags> {
        let mut values = HashMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(Day2DarkError::invalid(format!("unexpected argument {arg}")));
            };
            if i + 1 < args.len() && !args[i + 1].starts_with("--") {
                values.insert(name.to_string(), args[i + 1].clone());
                i += 2;
            } else {
                switches.push(name.to_string());
                i += 1;
            }
        }
        Ok(Flags { values, switches })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Day2DarkError::invalid(format!("missing required flag --{name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }
}

fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Ok(());
    };
    let flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(&flags),
        "audit" => cmd_audit(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "plot" => cmd_plot(&flags),
        "ablate" => cmd_ablate(&flags),
        other => Err(Day2DarkError::invalid(format!(
            "unknown command {other}\n{USAGE}"
        ))),
    }
}

fn load_bench_config(flags: &Flags) -> Result<BenchConfig> {
    match flags.get("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Day2DarkError::config(format!("bad bench config: {e}")))
        }
        None => Ok(BenchConfig::default()),
    }
}

fn load_train_config(flags: &Flags) -> Result<TrainConfig> {
    let base = match flags.get("preset") {
        Some("desk") => TrainConfig::desk(0),
        Some("full") | None => TrainConfig::default(),
        Some(other) => {
            return Err(Day2DarkError::invalid(format!(
                "unknown preset {other} (use desk or full)"
            )))
        }
    };
    match flags.get("config") {
        Some(path) => TrainConfig::from_json(&std::fs::read_to_string(path)?),
        None => Ok(base),
    }
}

/// Fit the recognizer's data-dependent fields to a loaded dataset.
fn adapt_to_dataset(cfg: &mut TrainConfig, ds: &toybench::DatasetSplit) {
    cfg.recognizer.n_classes = ds.n_classes;
    cfg.recognizer.multi_label = ds.multi_label;
    if let Some(first) = ds.train.first() {
        cfg.recognizer.clip_t = first.frames.t;
        cfg.recognizer.clip_h = first.frames.h;
        cfg.recognizer.clip_w = first.frames.w;
    }
}

fn parse_bins(flags: &Flags) -> Result<Vec<f64>> {
    match flags.get("bins") {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Day2DarkError::invalid(format!("bad bin edge {s}")))
            })
            .collect(),
        None => Ok(evalkit::default_bin_edges()),
    }
}

fn cmd_gen_data(flags: &Flags) -> Result<()> {
    if flags.has("print-default-config") {
        println!(
            "{}",
            serde_json::to_string_pretty(&BenchConfig::default()).expect("config serializes")
        );
        return Ok(());
    }
    let cfg = load_bench_config(flags)?;
    let out = PathBuf::from(flags.require("out")?);
    let ds = toybench::generate_dataset(&cfg)?;
    toybench::save_dataset(&ds, &out)?;
    println!(
        "wrote {} train / {} val / {} test / {} pool clips to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.pool.len(),
        out.display()
    );
    Ok(())
}

fn cmd_audit(flags: &Flags) -> Result<()> {
    let data = PathBuf::from(flags.require("data")?);
    let t: f64 = flags
        .get("t")
        .map(|s| s.parse().map_err(|_| Day2DarkError::invalid("bad --t")))
        .transpose()?
        .unwrap_or(illuminance::DARK_THRESHOLD);
    let bins = parse_bins(flags)?;
    let ds = toybench::load_dataset(&data)?;

    let mut csv = String::from("clip_id,clip_y,split\n");
    let mut report = String::new();
    let mut all: Vec<(String, f64)> = Vec::new();
    for (split, clips) in ds.splits() {
        report.push_str(&format!("split {split}: {} clips\n", clips.len()));
        for clip in clips {
            let rec = illuminance::clip_illuminance(clip)?;
            csv.push_str(&format!("{},{:.6},{split}\n", clip.id, rec.clip_y));
            all.push((format!("{split}/{}", clip.id), rec.clip_y));
        }
    }
    let (day, dark) = illuminance::partition(&all, t);
    report.push_str(&format!(
        "\nthreshold t = {t}\nday (Y > t): {} clips\ndark (Y <= t): {} clips\n",
        day.len(),
        dark.len()
    ));
    report.push_str("\ndark clip ids:\n");
    for id in &dark {
        report.push_str(&format!("  {id}\n"));
    }
    let ys: Vec<f64> = all.iter().map(|(_, y)| *y).collect();
    let hist = illuminance::illuminance_histogram(&ys, &bins)?;
    report.push_str("\nbin_lo,bin_hi,count,fraction\n");
    for (i, (count, frac)) in hist.counts.iter().zip(&hist.fractions).enumerate() {
        report.push_str(&format!(
            "{},{},{count},{frac:.4}\n",
            hist.bin_edges[i],
            hist.bin_edges[i + 1]
        ));
    }
    if hist.overflow > 0 {
        report.push_str(&format!("out-of-range clips: {}\n", hist.overflow));
    }

    match flags.get("out") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("audit.csv"), &csv)?;
            std::fs::write(dir.join("audit.txt"), &report)?;
            println!("wrote audit to {}", dir.display());
        }
        None => {
            println!("{report}");
            println!("{csv}");
        }
    }
    Ok(())
}

fn restore(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Trained> {
    let mut store = day2dark::nn::ParamStore::new();
    let mut rng = day2dark::rng::rng_for(cfg.seed, 0x01);
    let recognizer = Recognizer::new(cfg.recognizer.clone(), &mut store, &mut rng)?;
    let mut optimizer = SgdMomentum::new(cfg.momentum, store.len());
    ckpt.apply(&mut store, &mut optimizer)?;
    Ok(Trained {
        recognizer,
        store,
        optimizer,
        epoch: ckpt.epoch,
        log: Vec::new(),
    })
}

fn apply_checkpoint(cfg: &TrainConfig, path: &Path) -> Result<Trained> {
    let ckpt = Checkpoint::load(path, cfg.fingerprint())?;
    restore(cfg, &ckpt)
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let stage = flags.require("stage")?.to_string();
    let data = PathBuf::from(flags.require("data")?);
    let out = PathBuf::from(flags.require("out")?);
    let mut cfg = load_train_config(flags)?;
    let ds = toybench::load_dataset(&data)?;
    adapt_to_dataset(&mut cfg, &ds);
    std::fs::create_dir_all(&out)?;

    let cache = out.join("pseudo_targets.bin");
    let targets = pipeline::load_or_compute_pseudo_targets(&cfg, &ds, &cache)?;
    if targets.dim > 0 {
        cfg.recognizer.pseudo_dim = targets.dim;
    }
    let trained = match stage.as_str() {
        "1" => pipeline::train_stage1(&cfg, &ds, &targets)?,
        "2" => {
            let ckpt_path = PathBuf::from(flags.require("ckpt")?);
            let ckpt = Checkpoint::load(&ckpt_path, cfg.fingerprint())?;
            if ckpt.stage == "stage2" {
                // A stage-2 checkpoint resumes where it left off.
                pipeline::resume_stage2(&cfg, &ds, &ckpt)?
            } else {
                let stage1 = restore(&cfg, &ckpt)?;
                pipeline::train_stage2(&cfg, &ds, stage1)?
            }
        }
        "e2e" => {
            cfg.mode = TrainMode::EndToEnd;
            pipeline::train_end_to_end(&cfg, &ds, &targets)?
        }
        other => {
            return Err(Day2DarkError::invalid(format!(
                "unknown stage {other} (use 1, 2 or e2e)"
            )))
        }
    };

    let stage_tag = match stage.as_str() {
        "1" => "stage1",
        "2" => "stage2",
        _ => "e2e",
    };
    let ckpt = trained.checkpoint(stage_tag, cfg.fingerprint());
    let ckpt_path = out.join(format!("{stage_tag}.ckpt"));
    ckpt.save(&ckpt_path)?;
    std::fs::write(
        out.join(format!("{stage_tag}_log.csv")),
        epoch_logs_to_csv(&trained.log),
    )?;
    std::fs::write(out.join("train_config.json"), cfg.to_json())?;
    println!("wrote checkpoint {}", ckpt_path.display());
    for log in &trained.log {
        println!(
            "{} epoch {}: total {:.5} (ce {:.5}, pseudo {:.5}, mix {:.5})",
            log.stage, log.epoch, log.total, log.ce, log.pseudo, log.mix
        );
    }
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let data = PathBuf::from(flags.require("data")?);
    let ckpt_path = PathBuf::from(flags.require("ckpt")?);
    let mut cfg = load_train_config(flags)?;
    let ds = toybench::load_dataset(&data)?;
    adapt_to_dataset(&mut cfg, &ds);
    // Prefer the exact config the checkpoint was trained under, if present
    // next to it (covers the pseudo-head width adjustment).
    if flags.get("config").is_none() {
        if let Some(dir) = ckpt_path.parent() {
            let saved = dir.join("train_config.json");
            if saved.exists() {
                cfg = TrainConfig::from_json(&std::fs::read_to_string(saved)?)?;
            }
        }
    }
    let trained = apply_checkpoint(&cfg, &ckpt_path)?;
    let split = flags.get("split").unwrap_or("test");
    let clips = ds
        .split(split)
        .ok_or_else(|| Day2DarkError::invalid(format!("unknown split {split}")))?;
    let bins = parse_bins(flags)?;
    let model = RecognizerModel {
        recognizer: &trained.recognizer,
        store: &trained.store,
    };
    let fingerprint = trained.store.subset_hash(|_| true);
    let report = evalkit::evaluate(&model, clips, &bins, cfg.recognizer.t, fingerprint)?;
    println!(
        "{}: overall {:.4}, day {:.4}, dark {:.4}, gap {:.4}",
        report.metric_name,
        report.overall,
        report.day_metric,
        report.dark_metric,
        report.day2dark_gap
    );
    if let Some(dir) = flags.get("out") {
        let dir = PathBuf::from(dir);
        evalkit::emit_report(&report, &dir)?;
        println!("wrote report to {}", dir.display());
    }
    Ok(())
}

fn cmd_plot(flags: &Flags) -> Result<()> {
    let dir = PathBuf::from(flags.require("report")?);
    let csv = std::fs::read_to_string(dir.join("bins.csv"))?;
    let mut per_bin = Vec::new();
    for line in csv.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            continue;
        }
        per_bin.push(evalkit::BinMetric {
            lo: parts[0]
                .parse()
                .map_err(|_| Day2DarkError::invalid("bad bins.csv"))?,
            hi: parts[1]
                .parse()
                .map_err(|_| Day2DarkError::invalid("bad bins.csv"))?,
            count: parts[2]
                .parse()
                .map_err(|_| Day2DarkError::invalid("bad bins.csv"))?,
            metric: parts[3]
                .parse()
                .map_err(|_| Day2DarkError::invalid("bad bins.csv"))?,
        });
    }
    let report = evalkit::EvalReport {
        metric_name: "replot".into(),
        overall: 0.0,
        day_metric: 0.0,
        dark_metric: 0.0,
        day2dark_gap: 0.0,
        per_bin,
        n_clips: 0,
        n_day: 0,
        n_dark: 0,
        t: illuminance::DARK_THRESHOLD,
        model_fingerprint: 0,
    };
    evalkit::emit_report(&report, &dir)?;
    println!("refreshed plots in {}", dir.display());
    Ok(())
}

fn cmd_ablate(flags: &Flags) -> Result<()> {
    let axis = flags.require("axis")?.to_string();
    let data = PathBuf::from(flags.require("data")?);
    let mut cfg = load_train_config(flags)?;
    let ds = toybench::load_dataset(&data)?;
    adapt_to_dataset(&mut cfg, &ds);
    let rows = match axis.as_str() {
        "k" => pipeline::sweep_k(&cfg, &ds, &[1, 3, 5, 7])?,
        "lambda" => pipeline::sweep_lambda(&cfg, &ds, &[0.0, 0.01, 0.03])?,
        "pool" => {
            let n = ds.pool.len();
            pipeline::sweep_pool_size(&cfg, &ds, &[0, n / 2, n])?
        }
        "ladder" => pipeline::run_ladder(&cfg, &ds)?,
        other => return Err(Day2DarkError::invalid(format!("unknown axis {other}"))),
    };
    let csv = sweep_rows_to_csv(&rows);
    println!("{csv}");
    if let Some(dir) = flags.get("out") {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(format!("ablation_{axis}.csv")), &csv)?;
        println!("wrote table to {}", dir.display());
    }
    Ok(())
}
