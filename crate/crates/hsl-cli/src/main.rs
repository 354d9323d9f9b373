//! `hsl` — augment, segment and evaluate synthetic few-shot episodes.
//!
//! Exit codes: 0 success, 2 validation/format error, 3 numeric degeneracy.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hsl::config::Config;
use hsl::error::{Error, Result};
use hsl::harness::{
    episode_loss, evaluate, eval_episode, make_ambiguous_episode, make_contrast_episode,
    PipelineWeights, ToyBackboneSpec,
};
use hsl::hsm::{hsm_enhance, HsmWeights};
use hsl::io;
use hsl::pcmt::ThresholdMode;
use hsl::proto::gradient_check_trial;
use hsl::rng::StreamRng;
use hsl::styler;
use hsl::superpix::{self, SuperpixelStack};
use hsl::tensor::{ImageTensor, SoftMask};

#[derive(Parser)]
#[command(name = "hsl", about = "Hierarchical semantic learning pipeline", version)]
struct Cli {
    /// Config file (key=value lines); defaults to the desk-scale config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed or seed range, e.g. `7` or `0..4` (inclusive) or `1,5,9`.
    #[arg(long, global = true)]
    seed: Option<String>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply dual style randomization to one image.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which randomization to run.
        #[arg(long, default_value = "both", value_parser = ["fg", "global", "both"])]
        stage: String,
    },
    /// Multi-scale superpixel masks plus boundary overlays.
    Superpixel {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated region counts (perfect squares).
        #[arg(long)]
        scales: String,
        #[arg(long, default_value_t = superpix::DEFAULT_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = superpix::DEFAULT_TEMP)]
        temp: f64,
        #[arg(long = "out-prefix")]
        out_prefix: String,
    },
    /// Hierarchy-enhance a high-level feature tensor.
    Enhance {
        #[arg(long = "feat-low")]
        feat_low: PathBuf,
        #[arg(long = "feat-high")]
        feat_high: PathBuf,
        /// Comma-separated label tensor files, coarse to fine.
        #[arg(long)]
        labels: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = hsl::harness::MSA_HEADS)]
        heads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the loss decomposition for an episode directory.
    Loss {
        #[arg(long)]
        episode: PathBuf,
    },
    /// Segment an episode's query image.
    Segment {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Confidence heatmap output (PGM, with -2..2 mapped to 0..1).
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long = "threshold-mode", default_value = "pcmt")]
        threshold_mode: String,
    },
    /// Episode-protocol evaluation over one or more seeds.
    Eval {
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value = "pcmt")]
        mode: String,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-episode results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Verify analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Generate synthetic episode directories.
    MakeEpisodes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "standard", value_parser = ["standard", "ambiguous", "contrast"])]
        kind: String,
        #[arg(long = "k-shot", default_value_t = 1)]
        k_shot: usize,
        /// Minimum contrast for the `contrast` kind.
        #[arg(long, default_value_t = 0.8)]
        contrast: f64,
    },
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 =
            a.trim().parse().map_err(|_| Error::Parameter(format!("bad seed range `{spec}`")))?;
        let hi: u64 =
            b.trim().parse().map_err(|_| Error::Parameter(format!("bad seed range `{spec}`")))?;
        if hi < lo {
            return Err(Error::Parameter(format!("empty seed range `{spec}`")));
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Parameter(format!("bad seed `{s}`")))
        })
        .collect()
}

fn load_config(cli_config: &Option<PathBuf>, cli_seed: &Option<String>) -> Result<Config> {
    let mut cfg = match cli_config {
        Some(path) => io::read_config(path)?,
        None => Config::desk(),
    };
    if let Some(spec) = cli_seed {
        cfg.seed = *parse_seeds(spec)?
            .first()
            .ok_or_else(|| Error::Parameter("empty seed list".into()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn boundary_overlay(img: &ImageTensor, labels: &hsl::LabelMask) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let here = labels.get(y, x);
            let boundary = (x + 1 < w && labels.get(y, x + 1) != here)
                || (y + 1 < h && labels.get(y + 1, x) != here);
            if boundary {
                out.set(0, y, x, 1.0);
                out.set(1, y, x, 0.0);
                out.set(2, y, x, 0.0);
            }
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads > 0 {
            hsl::configure_threads(threads)?;
        }
    }
    let cfg = load_config(&cli.config, &cli.seed)?;

    match cli.command {
        Command::Augment { input, mask, out, stage } => {
            let img = io::read_ppm(&input)?;
            img.validate_full_size()?;
            let fg_mask = io::read_pgm(&mask)?;
            let mut rng = StreamRng::from_seed(cfg.seed);
            let styled = match stage.as_str() {
                "global" => styler::global_style_randomize(&img, &cfg, &mut rng),
                stage => {
                    let coarse = superpix::segment(
                        &img,
                        cfg.coarsest_scale(),
                        superpix::DEFAULT_ITERS,
                        superpix::DEFAULT_TEMP,
                    )?;
                    if stage == "fg" {
                        styler::foreground_style_randomize(&img, &fg_mask, &coarse, &cfg, &mut rng)?
                    } else {
                        styler::dsr(&img, &fg_mask, &coarse, &cfg, &mut rng)?
                    }
                }
            };
            io::write_ppm(&out, &styled)?;
            println!("wrote {}", out.display());
        }
        Command::Superpixel { input, scales, iters, temp, out_prefix } => {
            let img = io::read_ppm(&input)?;
            let scales: Vec<usize> = scales
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::Parameter(format!("bad scale `{s}`")))
                })
                .collect::<Result<_>>()?;
            for n in scales {
                let labels = superpix::segment(&img, n, iters, temp)?;
                let label_path = PathBuf::from(format!("{out_prefix}_{n}.hslt"));
                io::write_labels(&label_path, &labels)?;
                let overlay_path = PathBuf::from(format!("{out_prefix}_{n}_boundary.ppm"));
                io::write_ppm(&overlay_path, &boundary_overlay(&img, &labels))?;
                println!(
                    "scale {n}: {} regions -> {} / {}",
                    labels.present_labels().len(),
                    label_path.display(),
                    overlay_path.display()
                );
            }
        }
        Command::Enhance { feat_low, feat_high, labels, weights, alpha, heads, out } => {
            let f_low = io::read_feature(&feat_low)?;
            let f_high = io::read_feature(&feat_high)?;
            let masks: Vec<hsl::LabelMask> = labels
                .split(',')
                .map(|p| io::read_labels(std::path::Path::new(p.trim())))
                .collect::<Result<_>>()?;
            let (dims, blob) = io::read_tensor_f64(&weights)?;
            if dims.len() != 1 {
                return Err(Error::Format("weights file must hold a 1-D tensor".into()));
            }
            let hsm_weights =
                HsmWeights::from_flat(f_low.channels(), f_high.channels(), heads, &blob)?;
            let mut cfg = cfg.clone();
            cfg.scale_count = masks.len();
            if let Some(alpha) = alpha {
                cfg.alpha = alpha;
            }
            let scales = masks.iter().map(|m| m.region_count() as usize).collect();
            let stack = SuperpixelStack { masks, scales };
            let enhanced = hsm_enhance(&f_low, &f_high, &stack, &hsm_weights, &cfg)?;
            io::write_feature(&out, &enhanced)?;
            println!("wrote {}", out.display());
        }
        Command::Loss { episode } => {
            let episode = io::read_episode(&episode)?;
            let weights = PipelineWeights::seeded(&cfg)?;
            let report = episode_loss(&episode, &weights, &cfg)?;
            println!("l_final={:.6}", report.l_final);
            println!("ssp_fused={:.6}", report.ssp.fused_term);
            println!("ssp_query={:.6}", report.ssp.query_term);
            println!("ssp_support={:.6}", report.ssp.support_term);
            println!("lambda={}", report.ssp.lambda);
            println!("l_ssp={:.6}", report.ssp.total());
            println!("total={:.6}", report.total());
        }
        Command::Segment { episode, out, heatmap, threshold_mode } => {
            let mode: ThresholdMode = threshold_mode.parse()?;
            let episode = io::read_episode(&episode)?;
            let weights = PipelineWeights::seeded(&cfg)?;
            let prediction = hsl::pcmt::predict_episode(&episode, &weights, &cfg)?;
            io::write_pgm(&out, &prediction.mask(mode))?;
            if let Some(path) = heatmap {
                let data: Vec<f64> = prediction
                    .conf
                    .data()
                    .iter()
                    .map(|v| ((v + 2.0) / 4.0).clamp(0.0, 1.0))
                    .collect();
                let map = SoftMask::new(prediction.conf.height(), prediction.conf.width(), data)?;
                io::write_pgm(&path, &map)?;
            }
            println!("mode={mode}");
            println!("otsu_t={:.6}", prediction.otsu.threshold);
            println!("confidence={:.6}", prediction.confidence);
            println!("weight={:.6}", prediction.weight);
            println!("otsu_degenerate={}", prediction.otsu.degenerate);
            println!("wrote {}", out.display());
        }
        Command::Eval { episodes, mode, out, csv } => {
            let mode: ThresholdMode = mode.parse()?;
            let seeds = match &cli.seed {
                Some(spec) => parse_seeds(spec)?,
                None => vec![cfg.seed],
            };
            let report = evaluate(episodes, &seeds, &cfg, mode)?;
            let text = report.render();
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text)?;
            }
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
            }
        }
        Command::Gradcheck { trials } => {
            let mut worst_map: f64 = 0.0;
            let mut worst_proto: f64 = 0.0;
            for t in 0..trials {
                let trial = gradient_check_trial(cfg.seed.wrapping_add(t as u64))?;
                worst_map = worst_map.max(trial.map_error);
                worst_proto = worst_proto.max(trial.prototype_error);
            }
            println!("trials={trials}");
            println!("max_rel_err_maps={worst_map:.3e}");
            println!("max_rel_err_prototypes={worst_proto:.3e}");
            let ok = worst_map < 1e-4 && worst_proto < 1e-4;
            println!("pass={ok}");
            if !ok {
                return Err(Error::Degenerate("gradient check exceeded 1e-4".into()));
            }
        }
        Command::MakeEpisodes { out, count, kind, k_shot, contrast } => {
            let backbone = ToyBackboneSpec { seed: cfg.seed, ..ToyBackboneSpec::default() };
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let episode_seed = cfg.seed.wrapping_add(i as u64);
                let episode = match kind.as_str() {
                    "ambiguous" => {
                        make_ambiguous_episode(episode_seed, &backbone, cfg.image_size)?
                    }
                    "contrast" => make_contrast_episode(
                        episode_seed,
                        contrast,
                        &backbone,
                        cfg.image_size,
                        k_shot,
                    )?,
                    _ => eval_episode(&cfg, cfg.seed, i)?,
                };
                let dir = out.join(format!("ep_{i:04}"));
                io::write_episode(&dir, &episode)?;
            }
            println!("wrote {count} episodes under {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
