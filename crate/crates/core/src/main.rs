use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qlab::codec::{self, CodecParams};
use qlab::coder;
use qlab::config;
use qlab::data::{self, Image, ImageSet};
use qlab::entropy;
use qlab::error::{Error, Result};
use qlab::exp::{self, ExperimentOutcome};
use qlab::metrics;

#[derive(Parser)]
#[command(name = "qlab", about = "Quantizer-approximation laboratory for learned image compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment config across its lambda sweep and seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the seed list, e.g. --seeds 1,2
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Accepted for symmetry with `matrix`; runs always resume.
        #[arg(long)]
        resume: bool,
    },
    /// Expand a manifest into the combination matrix and run every cell.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        resume: bool,
        /// Also write the BD-rate table against this anchor config.
        #[arg(long, default_value = "aun+aun")]
        anchor: String,
    },
    /// Evaluate a checkpoint on a dataset: prints estimated BPP and PSNR.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
    /// BD-rate table from curve CSV files (one file per dataset).
    Bd {
        /// Curve CSV files; the file stem names the dataset column.
        #[arg(long, required = true, num_args = 1..)]
        curves: Vec<PathBuf>,
        #[arg(long, default_value = "aun+aun")]
        anchor: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic PPM dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Compress / decompress single images through a trained checkpoint.
    #[command(subcommand)]
    Codec(CodecCommand),
}

#[derive(Subcommand)]
enum CodecCommand {
    /// PPM image -> bitstream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bitstream -> PPM image.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory of PPM images; omit to use a synthetic set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    synth_count: usize,
    #[arg(long, default_value_t = 64)]
    synth_size: usize,
    #[arg(long, default_value_t = 1007)]
    synth_seed: u64,
}

impl DatasetArgs {
    fn load(&self) -> Result<ImageSet> {
        match &self.dataset {
            Some(dir) => data::load_ppm_dir(dir),
            None => data::synth_dataset(self.synth_count, self.synth_size, self.synth_seed),
        }
    }
}

fn report_outcomes(names: &[String], outcomes: &[ExperimentOutcome]) -> usize {
    let mut failures = 0;
    for (name, outcome) in names.iter().zip(outcomes) {
        for f in &outcome.failures {
            failures += 1;
            eprintln!("FAILED {name} lambda={} seed={}: {}", f.lambda, f.seed, f.message);
        }
        for c in &outcome.curves {
            let pts: Vec<String> =
                c.points.iter().map(|p| format!("({:.4} bpp, {:.2} dB)", p.bpp, p.psnr)).collect();
            println!("{}: {}", c.label, pts.join(" "));
        }
    }
    failures
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train { config, out, seeds, resume: _ } => {
            let mut cfg = config::experiment_from_file(&config, out)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            let outcome = exp::run_experiment(&cfg)?;
            let failures = report_outcomes(&[cfg.name.clone()], std::slice::from_ref(&outcome));
            Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Matrix { config, out, parallel, resume: _, anchor } => {
            let configs = config::matrix_from_manifest(&config, out)?;
            let names: Vec<String> = configs.iter().map(|c| c.name.clone()).collect();
            let outcomes = exp::run_matrix(&configs, parallel)?;
            let failures = report_outcomes(&names, &outcomes);
            let curves: Vec<metrics::RDCurve> =
                outcomes.iter().flat_map(|o| o.curves.iter().cloned()).collect();
            if curves.iter().any(|c| c.label.starts_with(&anchor)) {
                let table = exp::emit_table(&[("synthetic".to_string(), curves)], &anchor)?;
                let out_dir = &configs[0].out_dir;
                std::fs::create_dir_all(out_dir)?;
                let path = out_dir.join("bd_table.csv");
                std::fs::write(&path, table.to_csv())?;
                println!("BD-rate table written to {}", path.display());
                print!("{}", table.to_csv());
            }
            Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Eval { checkpoint, dataset } => {
            let params = CodecParams::load_infer(&checkpoint)?;
            let set = dataset.load()?;
            let point = exp::eval_model(&params, &set)?;
            println!("bpp_estimated,psnr");
            println!("{},{}", point.bpp, point.psnr);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bd { curves, anchor, out } => {
            let mut datasets = Vec::new();
            for path in &curves {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                datasets.push((name, metrics::read_curves_csv(path)?));
            }
            let table = exp::emit_table(&datasets, &anchor)?;
            let csv = table.to_csv();
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
            }
            print!("{csv}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, count, size, seed } => {
            let set = data::synth_dataset(count, size, seed)?;
            std::fs::create_dir_all(&out)?;
            for (i, img) in set.images.iter().enumerate() {
                data::save_ppm(&out.join(format!("synth_{i:04}.ppm")), img)?;
            }
            println!("wrote {} images to {}", set.images.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Codec(CodecCommand::Encode { checkpoint, input, out }) => {
            let params = CodecParams::load_infer(&checkpoint)?;
            let img = data::load_ppm(&input)?;
            if img.h % 8 != 0 || img.w % 8 != 0 {
                return Err(Error::invalid(format!(
                    "image sides must be multiples of 8, got {}x{}",
                    img.h, img.w
                )));
            }
            let x = img.to_tensor();
            let evald = codec::forward_eval(&x, &params)?;
            let tables = entropy::build_cdf_tables(&params.prior, None)?;
            let stream = coder::encode(
                &evald.symbols,
                &tables,
                (img.h as u32, img.w as u32),
                (evald.latent_h as u32, evald.latent_w as u32),
            )?;
            let bytes = stream.to_bytes();
            std::fs::write(&out, &bytes)?;
            let pixels = (img.h * img.w) as f64;
            println!(
                "encoded {}: actual {:.4} bpp, estimated {:.4} bpp",
                out.display(),
                bytes.len() as f64 * 8.0 / pixels,
                evald.bpp_estimated
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Codec(CodecCommand::Decode { checkpoint, input, out }) => {
            let params = CodecParams::load_infer(&checkpoint)?;
            let bytes = std::fs::read(&input)?;
            let stream = coder::Bitstream::from_bytes(&bytes)?;
            let symbols = coder::decode(&stream)?;
            let recon = codec::reconstruct_from_symbols(
                &params,
                &symbols,
                stream.latent_h as usize,
                stream.latent_w as usize,
            )?;
            let img = Image::from_chw(stream.image_h as usize, stream.image_w as usize, &recon)?;
            data::save_ppm(&out, &img)?;
            println!("decoded {} ({}x{})", out.display(), img.w, img.h);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
