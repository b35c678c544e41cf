//! Command-line front end: train a predictor, embed and extract messages,
//! export uncertainty maps and run the benchmark sweeps.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use bstego_core::bayes::{embedding_order, mc_sample, predicted_intensity, UncertaintyMap};
use bstego_core::codec::{bits_to_bytes, bytes_to_bits};
use bstego_core::eval::{
    capacity_csv, capacity_distortion_in, export_uncertainty_image, format_sig6, oracle_order,
    psnr, random_order, rmse_csv, rmse_curve, ssim, OrderingKind,
};
use bstego_core::grid::{
    chequerboard_partition, load_pgm, save_pgm, window_feature_count, Polarity,
};
use bstego_core::pipeline::{embed, extract, model_hash, EmbedContext, StegoKey};
use bstego_core::predictor::{
    extract_patches, init_model, load_model, save_model, train, TrainConfig,
};
use bstego_core::{DualHeadedModel, PixelGrid, UncertaintyScore};

#[derive(Parser)]
#[command(name = "bstego", version, about = "Reversible steganography with an uncertainty-aware predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dual-headed predictor on a directory of PGM images.
    Train {
        /// Directory of binary PGM training images.
        #[arg(long)]
        data: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        dropout: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        weight_decay: f64,
        /// Global L2 gradient-norm cap per step.
        #[arg(long, default_value_t = 1000.0)]
        max_grad_norm: f64,
        /// Cap on the number of training patches (seeded subsample).
        #[arg(long, default_value_t = 200_000)]
        max_patches: usize,
        /// Hidden layer widths, comma separated.
        #[arg(long, default_value = "64,64")]
        hidden: String,
        #[arg(long, default_value = "even")]
        polarity: String,
        #[arg(long, default_value_t = 2)]
        window_radius: u32,
        #[arg(long, default_value_t = 2)]
        border_margin: u32,
    },
    /// Embed a message file into a cover image.
    Embed {
        #[arg(long)]
        cover: PathBuf,
        /// Message file, treated as raw bytes.
        #[arg(long)]
        message: PathBuf,
        /// Key file of key=value lines (see README).
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output stego image.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the message and the exact cover from a stego image.
    Extract {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_cover: PathBuf,
        #[arg(long)]
        out_message: PathBuf,
    },
    /// Export uncertainty maps and prediction quality for one image.
    Analyze {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Prefix for the emitted PGM maps.
        #[arg(long)]
        out_prefix: String,
    },
    /// Write RMSE-vs-percentage and capacity-distortion CSVs for a directory
    /// of images under all orderings.
    Bench {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
        /// Embedding rates in bits per pixel, comma separated.
        #[arg(long, default_value = "0.01,0.02,0.05,0.1,0.2")]
        rates: String,
        /// Message seeds per (rate, ordering) point.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Random orderings averaged into the RMSE baseline.
        #[arg(long, default_value_t = 20)]
        random_orders: u64,
        /// Step of the percentage grid, in percent.
        #[arg(long, default_value_t = 1)]
        percent_step: u32,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            data,
            out,
            dropout,
            lambda,
            epochs,
            seed,
            lr,
            batch,
            weight_decay,
            max_grad_norm,
            max_patches,
            hidden,
            polarity,
            window_radius,
            border_margin,
        } => cmd_train(
            &data,
            &out,
            dropout,
            lambda,
            epochs,
            seed,
            lr,
            batch,
            weight_decay,
            max_grad_norm,
            max_patches,
            &hidden,
            &polarity,
            window_radius,
            border_margin,
        ),
        Command::Embed { cover, message, key, model, out } => {
            cmd_embed(&cover, &message, &key, &model, &out)
        }
        Command::Extract { stego, key, model, out_cover, out_message } => {
            cmd_extract(&stego, &key, &model, &out_cover, &out_message)
        }
        Command::Analyze { image, model, key, out_prefix } => {
            cmd_analyze(&image, &model, &key, &out_prefix)
        }
        Command::Bench { images, model, key, out, rates, seeds, random_orders, percent_step } => {
            cmd_bench(&images, &model, &key, &out, &rates, seeds, random_orders, percent_step)
        }
    }
}

// --- shared plumbing ---

fn read_grid(path: &Path) -> Result<PixelGrid> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_pgm(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn write_grid(path: &Path, grid: &PixelGrid) -> Result<()> {
    std::fs::write(path, save_pgm(grid)).with_context(|| format!("writing {}", path.display()))
}

fn read_model(path: &Path) -> Result<DualHeadedModel> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_model(&bytes).with_context(|| format!("loading model {}", path.display()))
}

/// Loads a key file and binds it to the model when it carries no hash yet.
fn read_key(path: &Path, model: &DualHeadedModel) -> Result<StegoKey> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut key =
        StegoKey::from_key_file(&text).with_context(|| format!("parsing {}", path.display()))?;
    if key.model_hash.is_empty() {
        key.model_hash = model_hash(model);
    }
    Ok(key)
}

/// PGM files in a directory, sorted by file name for reproducibility.
fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// CRC-32 (IEEE, reflected), appended to embedded messages for integrity
/// reporting.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

// --- commands ---

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    dropout: f64,
    lambda: f64,
    epochs: usize,
    seed: u64,
    lr: f64,
    batch: usize,
    weight_decay: f64,
    max_grad_norm: f64,
    max_patches: usize,
    hidden: &str,
    polarity: &str,
    window_radius: u32,
    border_margin: u32,
) -> Result<()> {
    let files = pgm_files(data)?;
    if files.is_empty() {
        eprintln!("error: no training data in {}", data.display());
        std::process::exit(2);
    }
    let polarity: Polarity = polarity.parse()?;
    let hidden_sizes: Vec<usize> = hidden
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| anyhow!("bad hidden width '{s}'")))
        .collect::<Result<_>>()?;

    let mut grids = Vec::with_capacity(files.len());
    for file in &files {
        grids.push(read_grid(file)?);
    }
    let dataset =
        extract_patches(&grids, polarity, border_margin, window_radius, max_patches, seed)?;
    println!(
        "training on {} patches from {} images ({} features per patch)",
        dataset.len(),
        grids.len(),
        window_feature_count(window_radius)
    );

    let mut layer_sizes = vec![window_feature_count(window_radius)];
    layer_sizes.extend(&hidden_sizes);
    let model = init_model(&layer_sizes, dropout, seed)?;
    let config = TrainConfig {
        lambda,
        learning_rate: lr,
        batch_size: batch,
        epochs,
        weight_decay,
        max_grad_norm,
        seed,
    };
    let (model, trace) = train(&dataset, &config, model)?;
    for (i, loss) in trace.iter().enumerate() {
        println!("epoch {:>3}/{} loss {}", i + 1, trace.len(), format_sig6(*loss));
    }

    let bytes = save_model(&model);
    std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    println!("model written to {} (hash {})", out.display(), model_hash(&model));
    Ok(())
}

fn cmd_embed(cover: &Path, message: &Path, key: &Path, model: &Path, out: &Path) -> Result<()> {
    let model = read_model(model)?;
    let key = read_key(key, &model)?;
    let cover_grid = read_grid(cover)?;
    let payload =
        std::fs::read(message).with_context(|| format!("reading {}", message.display()))?;

    // Message bits are the payload bytes MSB-first plus a CRC-32 trailer.
    let mut bits = bytes_to_bits(&payload);
    bits.extend(bytes_to_bits(&crc32(&payload).to_be_bytes()));

    let (stego, report) = embed(&cover_grid, &bits, &key, &model)?;
    write_grid(out, &stego)?;
    println!(
        "embedded {} message bits (+32-bit checksum) in {} pixels: bpp={} psnr_db={} frame_bits={} version={}",
        payload.len() * 8,
        report.pixels_modulated,
        format_sig6(report.bpp),
        format_sig6(report.psnr_db),
        report.frame_bits,
        report.format_version,
    );
    println!("stego written to {}", out.display());
    Ok(())
}

fn cmd_extract(
    stego: &Path,
    key: &Path,
    model: &Path,
    out_cover: &Path,
    out_message: &Path,
) -> Result<()> {
    let model = read_model(model)?;
    let key = read_key(key, &model)?;
    let stego_grid = read_grid(stego)?;

    let (cover, bits) = extract(&stego_grid, &key, &model)?;
    if bits.len() < 32 {
        bail!("recovered only {} bits, not even a checksum", bits.len());
    }
    let (message_bits, checksum_bits) = bits.split_at(bits.len() - 32);
    if message_bits.len() % 8 != 0 {
        bail!("recovered {} message bits, not a whole number of bytes", message_bits.len());
    }
    let payload = bits_to_bytes(message_bits)?;
    let declared = bits_to_bytes(checksum_bits)?
        .iter()
        .fold(0u32, |acc, &b| (acc << 8) | b as u32);
    let actual = crc32(&payload);
    if actual != declared {
        bail!("checksum mismatch: frame says {declared:08x}, payload hashes to {actual:08x}");
    }

    std::fs::write(out_message, &payload)
        .with_context(|| format!("writing {}", out_message.display()))?;
    write_grid(out_cover, &cover)?;
    println!("recovered {} bytes, checksum ok", payload.len());
    println!("cover written to {}", out_cover.display());
    println!("message written to {}", out_message.display());
    Ok(())
}

fn cmd_analyze(image: &Path, model: &Path, key: &Path, out_prefix: &str) -> Result<()> {
    let model = read_model(model)?;
    let key = read_key(key, &model)?;
    if key.model_hash != model_hash(&model) {
        bail!("key error: model hash mismatch");
    }
    let grid = read_grid(image)?;
    let partition = chequerboard_partition(&grid, key.polarity, key.border_margin)?;
    let samples = mc_sample(
        &model,
        &grid,
        &partition,
        key.window_radius,
        key.t_count,
        key.seed,
    )?;
    let map = UncertaintyMap::build(&samples, key.score)?;
    let predicted = predicted_intensity(&samples);

    for (name, values) in [
        ("aleatoric", &map.aleatoric),
        ("epistemic", &map.epistemic),
        ("hybrid", &map.hybrid),
    ] {
        let img = export_uncertainty_image(values, &partition, grid.width(), grid.height())?;
        let path = PathBuf::from(format!("{out_prefix}_{name}.pgm"));
        write_grid(&path, &img)?;
        println!("{name} map written to {}", path.display());
    }

    // Prediction quality: query pixels replaced by their predicted values.
    let mut predicted_grid = grid.clone();
    for (&(row, col), &value) in partition.query_positions.iter().zip(&predicted) {
        predicted_grid.set(row, col, value);
    }
    println!(
        "psnr={} ssim={}",
        format_sig6(psnr(&grid, &predicted_grid)?),
        format_sig6(ssim(&grid, &predicted_grid)?)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    images: &Path,
    model: &Path,
    key: &Path,
    out: &Path,
    rates: &str,
    seeds: u64,
    random_orders: u64,
    percent_step: u32,
) -> Result<()> {
    let model = read_model(model)?;
    let key = read_key(key, &model)?;
    let files = pgm_files(images)?;
    if files.is_empty() {
        eprintln!("error: no images in {}", images.display());
        std::process::exit(2);
    }
    if percent_step == 0 || percent_step > 100 {
        bail!("percent step must be in 1..=100");
    }
    let rates: Vec<f64> = rates
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow!("bad rate '{s}'")))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let fractions: Vec<f64> = (0..=100)
        .step_by(percent_step as usize)
        .map(|p| p as f64 / 100.0)
        .collect();

    for file in &files {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("unusable file name {}", file.display()))?;
        let cover = read_grid(file)?;
        let ctx = EmbedContext::new(&cover, &key, &model)?;
        let actual: Vec<u8> = ctx
            .partition
            .query_positions
            .iter()
            .map(|&(r, c)| ctx.pre_grid.get(r, c))
            .collect();
        let n_query = actual.len();
        let residuals = ctx.residuals();
        let (guaranteed, expected) = ctx.capacity();

        // RMSE-vs-percentage rows under every ordering; the random baseline
        // is the mean curve over seeded permutations.
        let mut rmse_rows: Vec<(f64, f64, String)> = Vec::new();
        let named: [(&str, Vec<usize>); 4] = [
            ("hybrid", embedding_order(&ctx.map.hybrid)?),
            ("aleatoric", embedding_order(&ctx.map.aleatoric)?),
            ("epistemic", embedding_order(&ctx.map.epistemic)?),
            ("oracle", oracle_order(&residuals)?),
        ];
        for (name, order) in &named {
            for (fraction, rmse) in rmse_curve(&actual, &ctx.predicted, order, &fractions)? {
                rmse_rows.push((fraction * 100.0, rmse, (*name).to_string()));
            }
        }
        let mut random_mean = vec![0.0f64; fractions.len()];
        for seed in 0..random_orders.max(1) {
            let order = random_order(n_query, seed);
            for (i, (_, rmse)) in rmse_curve(&actual, &ctx.predicted, &order, &fractions)?
                .into_iter()
                .enumerate()
            {
                random_mean[i] += rmse;
            }
        }
        for (i, &fraction) in fractions.iter().enumerate() {
            rmse_rows.push((
                fraction * 100.0,
                random_mean[i] / random_orders.max(1) as f64,
                "random".to_string(),
            ));
        }
        let rmse_path = out.join(format!("{stem}_rmse.csv"));
        std::fs::write(&rmse_path, rmse_csv(&rmse_rows))
            .with_context(|| format!("writing {}", rmse_path.display()))?;

        // Capacity-distortion rows: orderings x seeds, message seeded per
        // (seed, rate) point.
        let orderings = [
            OrderingKind::Uncertainty(UncertaintyScore::Hybrid),
            OrderingKind::Uncertainty(UncertaintyScore::Aleatoric),
            OrderingKind::Uncertainty(UncertaintyScore::Epistemic),
            OrderingKind::Random,
            OrderingKind::Oracle,
        ];
        let mut capacity_rows: Vec<(f64, Option<f64>, String, u64)> = Vec::new();
        for ordering in orderings {
            for seed in 0..seeds.max(1) {
                for point in capacity_distortion_in(&ctx, &cover, &rates, ordering, seed)? {
                    capacity_rows.push((point.bpp, point.psnr_db, ordering.to_string(), seed));
                }
            }
        }
        let capacity_path = out.join(format!("{stem}_capacity.csv"));
        std::fs::write(&capacity_path, capacity_csv(&capacity_rows))
            .with_context(|| format!("writing {}", capacity_path.display()))?;

        println!(
            "{stem}: {n_query} query pixels, capacity {guaranteed} bits guaranteed / {} expected; wrote {} and {}",
            format_sig6(expected),
            rmse_path.display(),
            capacity_path.display()
        );
    }
    Ok(())
}
