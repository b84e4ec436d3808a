mod pyramid;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edibnet::blur::{load_kernel_bank, make_pair};
use edibnet::io::depth::{DEFAULT_FIXED_RANGE_M, DEFAULT_UNITS_PER_METRE};
use edibnet::io::{
    crop, load_depth, load_model_weights, load_rgb, pad_reflectless, save_image, save_weights, DepthNorm, ImageBuffer,
};
use edibnet::metrics::{psnr, ssim};
use edibnet::model::{infer, init_params, ModelConfig};
use edibnet::profile::{benchmark_forward, count_complexity};
use edibnet::train::{curve_csv, list_images, load_dataset, Checkpoint, TrainConfig, Trainer};
use edibnet::wavelet::{decompose, reconstruct, WaveletBasis};
use edibnet::{Error, Tensor};

#[derive(Parser)]
#[command(name = "edibnet", version, about = "Depth-guided wavelet image deblurring")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose an image into wavelet sub-band images.
    Dwt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "haar")]
        wavelet: String,
        #[arg(long, default_value_t = 2)]
        levels: usize,
    },
    /// Rebuild an image from a `dwt` output directory.
    Idwt {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Must match the basis recorded in the directory, when given.
        #[arg(long)]
        wavelet: Option<String>,
    },
    /// Blur an image with a kernel drawn from a bank.
    Blur {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write the chosen kernel's index and name here.
        #[arg(long)]
        kernel_id_out: Option<PathBuf>,
    },
    /// Restore a blurred image.
    Deblur {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "channel16")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        depth_opts: DepthOpts,
    },
    /// Write freshly initialised weights.
    Init {
        #[arg(long, default_value = "channel16")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `DATA/rgb` (and `DATA/depth`) with synthetic blur.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long, default_value = "channel16")]
        config: String,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        depth_opts: DepthOpts,
    },
    /// Score restorations of `PAIRS/blurred` against `PAIRS/sharp`.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "channel16")]
        config: String,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        depth_opts: DepthOpts,
    },
    /// Count parameters and FLOPs at a given resolution.
    Profile {
        #[arg(long, default_value = "channel16")]
        config: String,
        #[arg(long, default_value = "1440x1920", value_parser = parse_hw)]
        image_hw: (usize, usize),
        #[arg(long, default_value = "192x256", value_parser = parse_hw)]
        depth_hw: (usize, usize),
        /// Text report, or JSON when the name ends in `.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time forward passes.
    Bench {
        #[arg(long, default_value = "channel16")]
        config: String,
        /// Freshly initialised weights are used when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value = "480x640", value_parser = parse_hw)]
        image_hw: (usize, usize),
        #[arg(long, default_value = "192x256", value_parser = parse_hw)]
        depth_hw: (usize, usize),
    },
    /// Write procedural scenes as a training directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: u64,
        #[arg(long, default_value = "256x256", value_parser = parse_hw)]
        size: (usize, usize),
        /// Image pixels per depth pixel along each axis.
        #[arg(long, default_value_t = 4)]
        depth_div: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormMode {
    Max,
    Fixed,
}

#[derive(Args)]
struct DepthOpts {
    /// Depth normalisation: per-image maximum or a fixed range.
    #[arg(long, value_enum, default_value = "max")]
    depth_norm: NormMode,
    /// Range in metres for `--depth-norm fixed`.
    #[arg(long, default_value_t = DEFAULT_FIXED_RANGE_M)]
    depth_range: f32,
    /// Raw depth integer units per metre.
    #[arg(long, default_value_t = DEFAULT_UNITS_PER_METRE)]
    depth_units: f32,
}

impl DepthOpts {
    fn norm(&self) -> DepthNorm {
        match self.depth_norm {
            NormMode::Max => DepthNorm::PerImageMax,
            NormMode::Fixed => DepthNorm::FixedRange(self.depth_range),
        }
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h = h.parse::<usize>().map_err(|e| format!("bad height in '{s}': {e}"))?;
    let w = w.parse::<usize>().map_err(|e| format!("bad width in '{s}': {e}"))?;
    if h == 0 || w == 0 {
        return Err(format!("empty size '{s}'"));
    }
    Ok((h, w))
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn data(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

/// Attach the flag that supplied a value to an error.
fn flag<T>(name: &str, r: edibnet::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.msg = format!("--{name}: {}", f.msg);
        f
    })
}

fn write_file(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn model_config(spec: &str) -> Result<ModelConfig, Failure> {
    flag("config", ModelConfig::load(spec))
}

fn load_depth_for(cfg: &ModelConfig, path: Option<&Path>, opts: &DepthOpts) -> Result<Option<Tensor>, Failure> {
    match (cfg.use_depth, path) {
        (true, Some(p)) => Ok(Some(flag("depth", load_depth(p, opts.norm(), opts.depth_units))?)),
        (true, None) => Err(Failure::usage("--depth: the selected config uses depth but no depth map was given")),
        (false, _) => Ok(None),
    }
}

/// Pad to the network's alignment, run it, crop back.
fn restore(
    store: &edibnet::model::ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    depth: Option<&Tensor>,
) -> edibnet::Result<Tensor> {
    let (padded, b) = pad_reflectless(image, cfg.required_multiple());
    crop(&infer(store, cfg, &padded, depth)?, b)
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Dwt { input, out_dir, wavelet, levels } => {
            let basis: WaveletBasis = flag("wavelet", wavelet.parse())?;
            if levels == 0 {
                return Err(Failure::usage("--levels: must be at least 1"));
            }
            let image = flag("in", edibnet::io::load_image(&input))?;
            let s = image.shape();
            let (padded, _) = pad_reflectless(&image, 1 << levels);
            let p = decompose(&padded, levels, basis)?;
            let layout = pyramid::Layout { basis, levels, height: s.h, width: s.w };
            flag("out-dir", pyramid::write(&out_dir, &p, &layout))
        }
        Command::Idwt { in_dir, out, wavelet } => {
            let (p, layout) = flag("in-dir", pyramid::read(&in_dir))?;
            if let Some(w) = wavelet {
                let basis: WaveletBasis = flag("wavelet", w.parse())?;
                if basis != layout.basis {
                    return Err(Failure::usage(format!(
                        "--wavelet: {} does not match the {} decomposition in {}",
                        basis.name(),
                        layout.basis.name(),
                        in_dir.display()
                    )));
                }
            }
            let x = reconstruct(&p, layout.basis)?;
            let x = flag("in-dir", x.crop(0, 0, layout.height, layout.width))?;
            flag("out", save_image(&x, &out))
        }
        Command::Blur { input, kernels, seed, out, kernel_id_out } => {
            let bank = flag("kernels", load_kernel_bank(&kernels))?;
            let image = flag("in", edibnet::io::load_image(&input))?;
            let pair = make_pair(&image, &bank, seed)?;
            flag("out", save_image(&pair.blurred, &out))?;
            if let Some(meta) = kernel_id_out {
                write_file(&meta, &format!("kernel_id = {}\nkernel_name = {}\nseed = {seed}\n", pair.kernel_id, pair.kernel_name))?;
            }
            Ok(())
        }
        Command::Deblur { input, depth, weights, config, out, depth_opts } => {
            let cfg = model_config(&config)?;
            let store = flag("weights", load_model_weights(&weights, &cfg))?;
            let image = flag("in", load_rgb(&input))?;
            let depth = load_depth_for(&cfg, depth.as_deref(), &depth_opts)?;
            let restored = restore(&store, &cfg, &image, depth.as_ref())?;
            flag("out", save_image(&restored, &out))
        }
        Command::Init { config, seed, out } => {
            let cfg = model_config(&config)?;
            let store = init_params(&cfg, seed)?;
            flag("out", save_weights(&store, &out))
        }
        Command::Train { data, kernels, config, train_config, out_ckpt, loss_csv, resume, depth_opts } => {
            let cfg = model_config(&config)?;
            let tc = match &train_config {
                Some(p) => flag("train-config", TrainConfig::load(p))?,
                None => TrainConfig::default(),
            };
            flag("train-config", tc.validate(&cfg))?;
            let bank = flag("kernels", load_kernel_bank(&kernels))?;
            let dataset = flag("data", load_dataset(&data, depth_opts.norm(), depth_opts.depth_units))?;
            if dataset.is_empty() {
                return Err(Failure::data(format!("--data: no images under {}", data.join("rgb").display())));
            }
            let mut trainer = match &resume {
                Some(p) => {
                    let ck = flag("resume", Checkpoint::load(p))?;
                    flag("resume", Trainer::resume(cfg, tc, &dataset, &bank, ck))?
                }
                None => flag("data", Trainer::new(cfg, tc, &dataset, &bank))?,
            };
            let csv_path = loss_csv.unwrap_or_else(|| out_ckpt.with_extension("loss.csv"));
            let total = trainer.total_steps();
            let curve = trainer.run(
                |r| {
                    if r.step % 50 == 0 || r.step + 1 == total {
                        eprintln!("step {:>6}/{total} lr {:.2e} loss {:.5}", r.step + 1, r.lr, r.total);
                    }
                },
                |epoch, ck| {
                    eprintln!("epoch {epoch}: checkpoint {}", out_ckpt.display());
                    ck.save(&out_ckpt)
                },
            );
            let curve = flag("out-ckpt", curve)?;
            let csv = curve_csv(&curve);
            if resume.is_some() && csv_path.exists() {
                let mut old = std::fs::read_to_string(&csv_path)
                    .map_err(|e| Failure::data(format!("cannot read {}: {e}", csv_path.display())))?;
                old.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
                write_file(&csv_path, &old)?;
            } else {
                write_file(&csv_path, &csv)?;
            }
            flag("out-ckpt", trainer.checkpoint().save(&out_ckpt))
        }
        Command::Eval { pairs, weights, config, report, depth_opts } => {
            let cfg = model_config(&config)?;
            let store = flag("weights", load_model_weights(&weights, &cfg))?;
            let blurred = flag("pairs", list_images(&pairs.join("blurred")))?;
            let sharp = flag("pairs", list_images(&pairs.join("sharp")))?;
            let depth_dir = pairs.join("depth");
            let depths = if depth_dir.is_dir() { flag("pairs", list_images(&depth_dir))? } else { Vec::new() };
            let find = |list: &[PathBuf], stem: &str| list.iter().find(|p| stem_of(p) == stem).cloned();
            let mut text = String::from("image\tpsnr_blurred\tssim_blurred\tpsnr_restored\tssim_restored\n");
            let mut sums = [0.0f64; 4];
            for b in &blurred {
                let stem = stem_of(b);
                let s = find(&sharp, &stem)
                    .ok_or_else(|| Failure::data(format!("--pairs: no sharp image for {}", b.display())))?;
                let d = find(&depths, &stem);
                let x = load_rgb(b)?;
                let y = load_rgb(&s)?;
                let depth = load_depth_for(&cfg, d.as_deref(), &depth_opts)?;
                let r = restore(&store, &cfg, &x, depth.as_ref())?.map(|v| v.clamp(0.0, 1.0));
                let row = [psnr(&x, &y, 1.0)?, ssim(&x, &y, 1.0)?, psnr(&r, &y, 1.0)?, ssim(&r, &y, 1.0)?];
                let _ = writeln!(text, "{stem}\t{:.4}\t{:.5}\t{:.4}\t{:.5}", row[0], row[1], row[2], row[3]);
                for (acc, v) in sums.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            if blurred.is_empty() {
                return Err(Failure::data(format!("--pairs: no images in {}", pairs.join("blurred").display())));
            }
            let n = blurred.len() as f64;
            let _ = writeln!(text, "mean\t{:.4}\t{:.5}\t{:.4}\t{:.5}", sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n);
            print!("{text}");
            write_file(&report, &text)
        }
        Command::Profile { config, image_hw, depth_hw, report } => {
            let cfg = model_config(&config)?;
            let r = count_complexity(&cfg, image_hw, depth_hw);
            println!(
                "params {} ({:.3}M)  flops {} ({:.2}G)  macs {:.2}G",
                r.params,
                r.params as f64 / 1e6,
                r.flops,
                r.flops as f64 / 1e9,
                r.macs as f64 / 1e9
            );
            match report {
                Some(p) if p.extension().is_some_and(|e| e == "json") => write_file(&p, &r.to_json()),
                Some(p) => write_file(&p, &r.to_text()),
                None => Ok(()),
            }
        }
        Command::Bench { config, weights, repeats, image_hw, depth_hw } => {
            let cfg = model_config(&config)?;
            let store = match &weights {
                Some(p) => flag("weights", load_model_weights(p, &cfg))?,
                None => init_params(&cfg, 0)?,
            };
            let m = cfg.required_multiple();
            if image_hw.0 % m != 0 || image_hw.1 % m != 0 {
                return Err(Failure::usage(format!("--image-hw: both sides must be multiples of {m}")));
            }
            let stats = benchmark_forward(&cfg, &store, image_hw, depth_hw, repeats)?;
            println!(
                "median {:.4}s  iqr {:.4}s  repeats {}  threads {}",
                stats.median_s,
                stats.iqr_s,
                stats.samples.len(),
                stats.threads
            );
            Ok(())
        }
        Command::Synth { out, count, size, depth_div, seed } => {
            if depth_div == 0 || size.0 % depth_div != 0 || size.1 % depth_div != 0 {
                return Err(Failure::usage("--depth-div: must divide both sides of --size"));
            }
            for dir in ["rgb", "depth"] {
                let d = out.join(dir);
                std::fs::create_dir_all(&d).map_err(|e| Failure::data(format!("cannot create {}: {e}", d.display())))?;
            }
            for i in 0..count {
                let (image, depth) = edibnet::synth::scene(seed + i, size.0, size.1, depth_div);
                let name = format!("scene{i:03}.png");
                flag("out", save_image(&image, &out.join("rgb").join(&name)))?;
                // millimetres over a 10 m range
                let s = depth.shape();
                let samples = depth.data().iter().map(|&v| (v * 10_000.0).round() as u16).collect();
                let buf = ImageBuffer { width: s.w, height: s.h, channels: 1, maxval: 65535, samples };
                flag("out", buf.write(&out.join("depth").join(&name)))?;
            }
            Ok(())
        }
    }
}

fn stem_of(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
