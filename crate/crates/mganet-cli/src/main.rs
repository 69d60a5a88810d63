//! Command-line pipeline: synthesize click corpora, train, estimate tempo,
//! evaluate datasets, render Grad-CAM heatmaps, and run the self-test
//! suite.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 contract/validation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mganet::checkpoint::Checkpoint;
use mganet::eval;
use mganet::frontend;
use mganet::manifest;
use mganet::network::{class_to_bpm, NetworkConfig};
use mganet::synth::{gen_dataset, SynthSpec, Timbres};
use mganet::train::{train_run_observed, TrainRunConfig, ValTrack};
use mganet::Error;

#[derive(Parser)]
#[command(name = "mganet", about = "single-step musical tempo estimation", version)]
struct Cli {
    /// RNG seed; every subcommand is deterministic given the seed (in
    /// single-worker mode).
    #[arg(long, global = true, default_value_t = 17)]
    seed: u64,
    /// Batch-assembly workers, each with its own RNG stream. Results are
    /// deterministic per (seed, workers) pair.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Gradient evaluation threads; identical results for any value
    /// (fixed reduction order). Defaults to up to four hardware threads.
    #[arg(long, global = true)]
    grad_threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ModelFlags {
    /// Channel width multiplier (1.0 = reference geometry).
    #[arg(long, default_value_t = 0.25)]
    width: f64,
    /// Ablation: remove the attention branches (trunks only).
    #[arg(long, conflicts_with_all = ["k1", "single_scale"])]
    no_attention: bool,
    /// Ablation: one attention group per module.
    #[arg(long, conflicts_with = "single_scale")]
    k1: bool,
    /// Ablation: keep only the highest-resolution branch.
    #[arg(long)]
    single_scale: bool,
}

impl ModelFlags {
    fn config(&self, multitask: bool) -> NetworkConfig {
        let mut config = NetworkConfig::standard(self.width);
        if self.no_attention {
            config.attention_bypass = true;
        }
        if self.k1 {
            config.groups = vec![1; config.groups.len()];
        }
        if self.single_scale {
            config.branches = 1;
        }
        config.include_beat_branch = multitask;
        config
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic click-track dataset (WAVs + tempo/beat TSVs).
    Synth {
        /// Output directory.
        out_dir: PathBuf,
        #[arg(long, default_value_t = 96)]
        count: usize,
        #[arg(long, default_value_t = 60.0)]
        bpm_lo: f64,
        #[arg(long, default_value_t = 180.0)]
        bpm_hi: f64,
        #[arg(long, default_value_t = 12.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = -60.0)]
        noise_db: f64,
        /// Add a sustained pad under the clicks.
        #[arg(long)]
        pad: bool,
    },
    /// Train a model from a tempo manifest (`path<TAB>bpm`).
    Train {
        /// Tempo annotation manifest.
        manifest: PathBuf,
        /// Where to write the best checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Beat annotation manifest (`path<TAB>t1,t2,...`), needed for --multitask.
        #[arg(long)]
        beats: Option<PathBuf>,
        /// Held-out validation track count (taken from the end of the manifest).
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Validation interval in iterations.
        #[arg(long)]
        interval: Option<u64>,
        /// Stop after this many iterations without improvement.
        #[arg(long)]
        patience: Option<u64>,
        /// Use the reference schedule (interval 500, patience 50000).
        #[arg(long)]
        paper_schedule: bool,
        /// Alternate tempo and beat objectives every epoch.
        #[arg(long)]
        multitask: bool,
        /// Augmented dataset size (default 2.5x the originals).
        #[arg(long)]
        augment_target: Option<usize>,
        /// Training log file (default: <out>.log).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Optional spectrogram cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Estimate the tempo of one WAV file.
    Estimate {
        wav: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Segment hop in frames during aggregation.
        #[arg(long, default_value_t = 128)]
        hop: usize,
    },
    /// Evaluate a tempo manifest against a checkpoint.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        hop: usize,
        /// Report file (default: report.tsv next to the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a Grad-CAM heatmap for one WAV segment.
    Gradcam {
        wav: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer selector (see error message for the catalogue).
        #[arg(long, default_value = "branch0.features")]
        layer: String,
        /// Target class; defaults to the argmax of the segment distribution.
        #[arg(long)]
        class: Option<usize>,
        /// Which 128-frame segment of the track to explain.
        #[arg(long, default_value_t = 0)]
        segment: usize,
        /// Output prefix; writes <out>.ppm and <out>.csv.
        #[arg(long, default_value = "gradcam")]
        out: PathBuf,
    },
    /// Run the built-in oracle and gradient check suite.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own rendering, but with the documented usage exit code
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth { out_dir, count, bpm_lo, bpm_hi, duration, jitter, noise_db, pad } => {
            let spec = SynthSpec {
                count,
                bpm_lo,
                bpm_hi,
                duration_seconds: duration,
                timbres: Timbres { pad, ..Timbres::default() },
                jitter,
                noise_floor_db: noise_db,
                seed: cli.seed,
            };
            let paths = gen_dataset(&spec, &out_dir)?;
            println!("wrote {} tracks to {}", paths.tracks.len(), paths.dir.display());
            println!("tempo manifest: {}", paths.tempo_tsv.display());
            println!("beat manifest:  {}", paths.beats_tsv.display());
            Ok(())
        }
        Cmd::Train {
            manifest: manifest_path,
            out,
            beats,
            val_count,
            batch,
            lr,
            interval,
            patience,
            paper_schedule,
            multitask,
            augment_target,
            log,
            cache,
            model,
        } => {
            let config = model.config(multitask);
            let mut examples = match &cache {
                Some(dir) => load_examples_cached(&manifest_path, beats.as_deref(), dir)?,
                None => manifest::load_train_examples(&manifest_path, beats.as_deref())?,
            };
            let n_val = val_count.unwrap_or_else(|| (examples.len() / 5).max(1));
            if n_val >= examples.len() {
                return Err(Error::Config(format!(
                    "validation count {n_val} leaves no training tracks (have {})",
                    examples.len()
                )));
            }
            let val: Vec<ValTrack> = examples
                .split_off(examples.len() - n_val)
                .into_iter()
                .map(|e| ValTrack { track_id: e.track_id, spec: e.spec, bpm: e.bpm })
                .collect();

            let mut tcfg = TrainRunConfig {
                batch_size: batch,
                learning_rate: lr,
                seed: cli.seed,
                multitask,
                augment_target,
                workers: cli.workers,
                gradient_threads: cli.grad_threads,
                ..TrainRunConfig::default()
            };
            if paper_schedule {
                tcfg = tcfg.paper_schedule();
            }
            if let Some(i) = interval {
                tcfg.validation_interval = i;
            }
            if let Some(p) = patience {
                tcfg.patience = p;
            }

            println!(
                "training: {} train tracks, {} val tracks, width {}, seed {}",
                examples.len(),
                val.len(),
                model.width,
                cli.seed
            );
            let outcome = train_run_observed::<f32>(&config, examples, &val, &tcfg, |r| {
                println!("iteration={} loss={:.4} val_acc1={:.4}", r.iteration, r.loss, r.val_acc1);
            })?;

            let ck = Checkpoint::new(config, outcome.best_params)?;
            ck.save(&out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone();
                p.set_extension("log");
                p
            });
            let mut text = String::new();
            for r in &outcome.log {
                text.push_str(&format!(
                    "iteration={} loss={:.6} val_acc1={:.6}\n",
                    r.iteration, r.loss, r.val_acc1
                ));
            }
            std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
            println!(
                "done: best val_acc1 {:.4} at iteration {} (of {}); checkpoint {}",
                outcome.best_acc1,
                outcome.best_iteration,
                outcome.iterations,
                out.display()
            );
            Ok(())
        }
        Cmd::Estimate { wav, checkpoint, hop } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let spec = frontend::wav_to_mel(&wav)?;
            let id = wav.to_string_lossy().to_string();
            let est = eval::aggregate_global_tempo(&ck.config, &ck.params, &spec, &id, hop)?;
            println!("bpm {:.1}", est.bpm);
            println!("segments {}", est.segment_count);
            for (class, p) in est.distribution.top_k(5) {
                println!("class {class} bpm {:.0} p {:.4}", class_to_bpm(class), p);
            }
            Ok(())
        }
        Cmd::Evaluate { manifest: manifest_path, checkpoint, hop, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let rows = manifest::read_tempo_manifest(&manifest_path)?;
            let report = eval::evaluate_dataset(&ck.config, &ck.params, &rows, hop)?;
            let out = out.unwrap_or_else(|| {
                manifest_path.parent().unwrap_or(std::path::Path::new(".")).join("report.tsv")
            });
            std::fs::write(&out, report.render()).map_err(|e| Error::io(&out, e))?;
            println!(
                "tracks {} failures {} accuracy1 {:.4} accuracy2 {:.4}",
                report.rows.len(),
                report.failures.len(),
                report.acc1(),
                report.acc2()
            );
            println!("report: {}", out.display());
            Ok(())
        }
        Cmd::Gradcam { wav, checkpoint, layer, class, segment, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let net = ck.network::<f32>()?;
            let spec = frontend::wav_to_mel(&wav)?;
            let id = wav.to_string_lossy().to_string();
            let segments = frontend::make_segments(&spec, 128, &id);
            let seg = segments.get(segment).ok_or_else(|| {
                Error::Contract(format!(
                    "segment index {segment} out of range (track has {})",
                    segments.len()
                ))
            })?;
            let target = match class {
                Some(c) => c,
                None => net.distribution(seg)?.argmax_class(),
            };
            let heatmap = eval::grad_cam(&net, seg, target, &layer)?;
            let ppm = out.with_extension("ppm");
            let csv = out.with_extension("csv");
            eval::render_heatmap(&heatmap, &ppm, &csv)?;
            println!(
                "layer {} class {} ({:.0} bpm): {} and {}",
                heatmap.layer,
                target,
                class_to_bpm(target),
                ppm.display(),
                csv.display()
            );
            Ok(())
        }
        Cmd::Selftest => {
            let results = mganet::selftest::run();
            let mut failed = 0;
            for r in &results {
                println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} selftest check(s) failed")));
            }
            println!("all {} checks passed", results.len());
            Ok(())
        }
    }
}

/// Manifest loading with a spectrogram cache: one MSPC file per track,
/// keyed by the audio file name.
fn load_examples_cached(
    tempo_manifest: &std::path::Path,
    beats_manifest: Option<&std::path::Path>,
    cache_dir: &std::path::Path,
) -> Result<Vec<mganet::train::TrainExample>, Error> {
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let rows = manifest::read_tempo_manifest(tempo_manifest)?;
    let beats: std::collections::BTreeMap<PathBuf, Vec<f64>> = match beats_manifest {
        Some(p) => manifest::read_beats_manifest(p)?.into_iter().collect(),
        None => Default::default(),
    };
    let mut out = Vec::with_capacity(rows.len());
    for (path, bpm) in rows {
        let stem = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        let cached = cache_dir.join(format!("{stem}.mspc"));
        let spec = match frontend::load_spectrogram_cache(&cached) {
            Ok(spec) => spec,
            Err(_) => {
                let spec = frontend::wav_to_mel(&path)?;
                frontend::save_spectrogram_cache(&cached, &spec)?;
                spec
            }
        };
        let mut ex = mganet::train::TrainExample::new(path.to_string_lossy(), spec, bpm);
        if let Some(times) = beats.get(&path) {
            ex.beat_frames = Some(times.iter().map(|&t| manifest::beat_time_to_frame(t)).collect());
        }
        out.push(ex);
    }
    Ok(out)
}
