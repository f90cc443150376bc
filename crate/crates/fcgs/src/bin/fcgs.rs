use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fcgs::error::{Error, Result};
use fcgs::model_io::{parse_ply, write_ply};
use fcgs::neural::{gen_test_weights, load_weights, ModelWeights};
use fcgs::pipeline::{
    decode_scene, encode_scene, inspect, scene_rate_estimate, CodecOptions, RateReport,
    WARN_CLAMP_FRACTION,
};

#[derive(Parser)]
#[command(name = "fcgs", version, about = "Feed-forward compressor for 3D Gaussian splatting scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PLY scene into a .fcgs file.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1 << 20)]
        chunk_size: u64,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        json: bool,
    },
    /// Decompress a .fcgs file back to PLY.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Print the size breakdown of a .fcgs file; needs no weights.
    Inspect {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Predict the compressed size of a PLY scene without writing a file.
    Estimate {
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1 << 20)]
        chunk_size: u64,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write a deterministic synthetic weights container for testing.
    GenTestWeights {
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_file(path: &PathBuf) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::Io)
}

fn load_weights_file(path: &PathBuf) -> Result<ModelWeights> {
    load_weights(&read_file(path)?)
}

fn print_report(report: &RateReport, json: bool) -> Result<()> {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?
        );
        return Ok(());
    }
    println!("gaussians            {}", report.n);
    println!("positions            {:>12} B  ({:.2} bits/point)", report.positions_bytes, report.positions_bits_per_point);
    println!("masks                {:>12} B  (mask rate {:.4})", report.masks_bytes, report.mask_rate);
    println!("geometry attrs       {:>12} B", report.geo_bytes);
    println!("color (direct path)  {:>12} B", report.col_m0_bytes);
    println!("color (latent path)  {:>12} B", report.col_m1_bytes);
    println!("framing              {:>12} B", report.header_bytes);
    println!("total                {:>12} B", report.total_bytes);
    for (name, secs) in &report.timings_secs {
        println!("time {name:<16} {secs:>10.3} s");
    }
    Ok(())
}

fn warn_clamps(report: &RateReport) {
    if report.clamp_fraction() > WARN_CLAMP_FRACTION {
        eprintln!(
            "warning: {} of {} coded symbols were clamped into their coding window; \
             the weights may not match this scene's value range",
            report.clamp_events, report.coded_symbols
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { input, output, weights, seed, chunk_size, workers, json } => {
            let cloud = parse_ply(&read_file(&input)?)?;
            let w = load_weights_file(&weights)?;
            let opts = CodecOptions { seed, chunk_size, workers };
            let out = encode_scene(&cloud, &w, &opts, None)?;
            fs::write(&output, &out.bytes).map_err(Error::Io)?;
            warn_clamps(&out.report);
            print_report(&out.report, json)?;
        }
        Command::Decode { input, output, weights, workers } => {
            let bytes = read_file(&input)?;
            let w = load_weights_file(&weights)?;
            let out = decode_scene(&bytes, &w, workers)?;
            if out.trailing > 0 {
                eprintln!("warning: ignored {} trailing bytes after the last section", out.trailing);
            }
            fs::write(&output, write_ply(&out.cloud)?).map_err(Error::Io)?;
            println!("decoded {} gaussians", out.cloud.count);
        }
        Command::Inspect { input, json } => {
            let report = inspect(&read_file(&input)?)?;
            print_report(&report, json)?;
        }
        Command::Estimate { input, weights, seed, chunk_size, workers, json } => {
            let cloud = parse_ply(&read_file(&input)?)?;
            let w = load_weights_file(&weights)?;
            let opts = CodecOptions { seed, chunk_size, workers };
            let report = scene_rate_estimate(&cloud, &w, &opts)?;
            warn_clamps(&report);
            print_report(&report, json)?;
        }
        Command::GenTestWeights { output, seed } => {
            let w = gen_test_weights(seed);
            fs::write(&output, w.serialize()).map_err(Error::Io)?;
            println!("wrote weights with fingerprint {}", fcgs::container::fingerprint_hex(&w.fingerprint()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
