//! Subcommand implementations.

use std::path::{Path, PathBuf};

use defacer_core::bench::{bench_deface, bench_external, format_table, make_bench_input, speedup, BenchConfig};
use defacer_core::deface::{predict_mask, run_deface, DEFAULT_TAU};
use defacer_core::io::{load_weights, read_nifti, read_nifti_header, save_weights, write_nifti, write_nifti_mask};
use defacer_core::metrics::{evaluate as evaluate_cases, EvalCase};
use defacer_core::optim::{train_loop, AdamConfig, TrainData, TrainOptions, TrainSample};
use defacer_core::phantom::{generate_corpus, load_split, CorpusOptions, DatasetManifest, Split};
use defacer_core::pipeline::{fit_dim, AugmentRanges, FitOptions, Volume};
use defacer_core::unet::{build_model, model_summary, ModelConfig, Variant};
use defacer_core::{Error, Result};

use crate::config::{pick, resolve_data_dir, FileConfig};
use crate::CommonOpts;

fn thread_pool(common: &CommonOpts, config: &FileConfig) -> Result<rayon::ThreadPool> {
    let threads = pick(common.threads, config.get("threads")?, 0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads) // 0 = one per core
        .build()
        .map_err(|e| Error::Usage(format!("cannot build thread pool: {e}")))
}

pub fn make_phantoms(
    common: &CommonOpts,
    out: &Path,
    count: usize,
    protocols: usize,
    seed: u64,
) -> Result<()> {
    let _config = FileConfig::load(common.config.as_deref())?;
    let manifest = generate_corpus(
        out,
        &CorpusOptions {
            count,
            protocols,
            seed,
        },
    )?;
    let splits = |s: Split| manifest.rows_for(s).len();
    println!(
        "wrote {} phantoms over {} protocols to {} (train/val/test = {}/{}/{})",
        manifest.rows.len(),
        protocols,
        out.display(),
        splits(Split::Train),
        splits(Split::Val),
        splits(Split::Test),
    );
    Ok(())
}

fn parse_filters(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad filter count '{p}'")))
        })
        .collect()
}

fn model_config(variant: &str, filters: Option<&str>) -> Result<ModelConfig> {
    let variant: Variant = variant.parse()?;
    let mut config = ModelConfig::canonical(variant);
    if let Some(filters) = filters {
        let filters = parse_filters(filters)?;
        let last = *filters.last().ok_or_else(|| Error::Config("empty filter list".into()))?;
        config.bottleneck = match variant {
            Variant::DeepDefacer => last * 2,
            Variant::Baseline => last * 4,
        };
        config.encoder_filters = filters;
        config.validate()?;
    }
    Ok(config)
}

pub struct TrainArgs {
    pub common: CommonOpts,
    pub data: Option<PathBuf>,
    pub variant: String,
    pub filters: Option<String>,
    pub iters: Option<u64>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub no_augment: bool,
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub shrink: Option<f64>,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config_file = FileConfig::load(args.common.config.as_deref())?;
    let pool = thread_pool(&args.common, &config_file)?;
    let data_dir = resolve_data_dir(args.data.clone(), &config_file)?;

    let manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    let to_samples = |cases: Vec<defacer_core::phantom::LoadedCase>| {
        cases
            .into_iter()
            .map(|c| TrainSample {
                id: c.id,
                image: c.image,
                mask: c.mask,
            })
            .collect::<Vec<_>>()
    };
    let data = TrainData {
        train: to_samples(load_split(&data_dir, &manifest, Split::Train)?),
        val: to_samples(load_split(&data_dir, &manifest, Split::Val)?),
    };

    let model_config = model_config(&args.variant, args.filters.as_deref())?;
    let seed = pick(args.seed, config_file.get("seed")?, 0);
    let iterations = pick(args.iters, config_file.get("iters")?, 200);
    let lr = pick(args.lr, config_file.get("lr")?, 1e-4);
    let shrink = pick(args.shrink, config_file.get("shrink")?, 0.5);

    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let opts = TrainOptions {
        iterations,
        seed,
        adam: AdamConfig {
            learning_rate: lr,
            ..Default::default()
        },
        augment: if args.no_augment {
            None
        } else {
            Some(AugmentRanges::default())
        },
        fit: FitOptions {
            shrink,
            ..Default::default()
        },
        validate_every: args.val_every,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: args.checkpoint_dir.clone(),
        tau: DEFAULT_TAU,
    };

    let (mut store, model_config) = match &args.init {
        Some(path) => {
            let (store, _) = load_weights(path)?;
            let config = ModelConfig::infer_from_store(&store)?;
            (store, config)
        }
        None => (build_model(&model_config, seed)?, model_config),
    };
    let report = pool.install(|| train_loop(&mut store, &model_config, &data, &opts))?;
    save_weights(&store, model_config.variant, &args.out)?;

    if let Some(path) = &args.metrics {
        let mut text = String::new();
        for record in &report.iterations {
            text.push_str(&serde_json::to_string(record).expect("serializable"));
            text.push('\n');
        }
        for record in &report.validations {
            text.push_str(&serde_json::to_string(record).expect("serializable"));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.report {
        // timing-free report: bit-identical across reruns with one seed
        let body = serde_json::json!({
            "variant": model_config.variant.as_str(),
            "filters": model_config.encoder_filters,
            "iterations": iterations,
            "seed": seed,
            "loss_curve": report.loss_curve(),
            "validations": report.validations,
            "best": report.best,
            "final_loss": report.final_loss,
        });
        std::fs::write(path, serde_json::to_string_pretty(&body).expect("serializable"))
            .map_err(|e| Error::io(path, e))?;
    }

    match report.final_loss {
        Some(loss) => println!(
            "trained {} iterations, final loss {loss:.5}; model written to {}",
            report.iterations.len(),
            args.out.display()
        ),
        None => println!(
            "no iterations requested; initial model written to {}",
            args.out.display()
        ),
    }
    if let Some(best) = &report.best {
        println!("best validation dice {:.4} at iteration {}", best.dice, best.iter);
    }
    Ok(())
}

pub fn deface(
    common: &CommonOpts,
    model: &Path,
    input: &Path,
    out: &Path,
    mask_out: Option<&Path>,
    shrink: Option<f64>,
) -> Result<()> {
    let config_file = FileConfig::load(common.config.as_deref())?;
    let pool = thread_pool(common, &config_file)?;
    let shrink = pick(shrink, config_file.get("shrink")?, 0.5);

    let (store, _variant) = load_weights(model)?;
    let model_config = ModelConfig::infer_from_store(&store)?;

    let t_read = std::time::Instant::now();
    let image = read_nifti(input)?;
    let read_ms = t_read.elapsed().as_secs_f64() * 1e3;

    let fit = FitOptions {
        shrink,
        ..Default::default()
    };
    warn_if_shrink_ineffective(&image, &fit);

    let result = pool.install(|| run_deface(&store, &model_config, &image, &fit, DEFAULT_TAU))?;

    let t_write = std::time::Instant::now();
    write_nifti(&result.defaced, out)?;
    if let Some(mask_path) = mask_out {
        write_nifti_mask(&result.mask, mask_path)?;
    }
    let write_ms = t_write.elapsed().as_secs_f64() * 1e3;

    let t = &result.timings;
    println!(
        "read {read_ms:.1} ms | normalize {:.1} ms | fit {:.1} ms | forward {:.1} ms | restore {:.1} ms | threshold {:.1} ms | hadamard {:.1} ms | write {write_ms:.1} ms",
        t.normalize_ms, t.fit_ms, t.forward_ms, t.restore_ms, t.threshold_ms, t.deface_ms
    );
    println!(
        "defaced {} -> {} ({:.1} ms total)",
        input.display(),
        out.display(),
        read_ms + t.total_ms() + write_ms
    );
    Ok(())
}

fn warn_if_shrink_ineffective(image: &Volume, fit: &FitOptions) {
    if fit.shrink >= 1.0 {
        return;
    }
    let shrunk_applies = image.dims.iter().any(|&d| {
        let shrunk = ((d as f64 * fit.shrink / 16.0).round() as usize) * 16;
        shrunk >= fit_dim(d, fit) && shrunk > 0
    });
    if !shrunk_applies {
        eprintln!(
            "warning: input dims {:?} are at or below the inference floor; proceeding without shrink",
            image.dims
        );
    }
}

pub fn evaluate(
    common: &CommonOpts,
    model: &Path,
    data: Option<PathBuf>,
    split: &str,
    report_path: Option<&Path>,
    shrink: Option<f64>,
) -> Result<()> {
    let config_file = FileConfig::load(common.config.as_deref())?;
    let pool = thread_pool(common, &config_file)?;
    let data_dir = resolve_data_dir(data, &config_file)?;
    let shrink = pick(shrink, config_file.get("shrink")?, 0.5);

    let (store, _) = load_weights(model)?;
    let model_config = ModelConfig::infer_from_store(&store)?;
    let split: Split = split.parse()?;

    let manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    let cases: Vec<EvalCase> = load_split(&data_dir, &manifest, split)?
        .into_iter()
        .map(|c| EvalCase {
            id: c.id,
            protocol: c.protocol.key(),
            image: c.image,
            truth: Some(c.mask),
        })
        .collect();
    if cases.is_empty() {
        return Err(Error::EmptyInput(format!(
            "split '{}' has no rows",
            split.as_str()
        )));
    }

    let fit = FitOptions {
        shrink,
        ..Default::default()
    };
    let source = |image: &Volume| predict_mask(&store, &model_config, image, &fit, DEFAULT_TAU);
    let report = pool.install(|| evaluate_cases(&source, &cases))?;

    print!("{}", report.to_text());
    if let Some(path) = report_path {
        std::fs::write(path, report.to_jsonl()).map_err(|e| Error::io(path, e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

pub struct BenchArgs {
    pub common: CommonOpts,
    pub model_a: PathBuf,
    pub model_b: PathBuf,
    pub dims: String,
    pub reps: usize,
    pub bench_threads: String,
    pub shrink: Option<f64>,
    pub external: Option<String>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad dims component '{p}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("dims must be DxHxW, got '{text}'")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let config_file = FileConfig::load(args.common.config.as_deref())?;
    let shrink = pick(args.shrink, config_file.get("shrink")?, 0.5);
    let dims = parse_dims(&args.dims)?;
    let thread_counts: Vec<usize> = args
        .bench_threads
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad thread count '{p}'")))
        })
        .collect::<Result<_>>()?;

    let (store_a, _) = load_weights(&args.model_a)?;
    let config_a = ModelConfig::infer_from_store(&store_a)?;
    let (store_b, _) = load_weights(&args.model_b)?;
    let config_b = ModelConfig::infer_from_store(&store_b)?;

    let tmp;
    let out_dir = match &args.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            dir.clone()
        }
        None => {
            tmp = std::env::temp_dir().join(format!("defacer-bench-{}", std::process::id()));
            std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            tmp.clone()
        }
    };

    let bench_config = BenchConfig {
        dims,
        reps: args.reps,
        warmup: 1,
        fit: FitOptions {
            shrink,
            ..Default::default()
        },
        tau: DEFAULT_TAU,
        seed: args.seed,
    };
    let input = out_dir.join("bench_input.nii");
    make_bench_input(dims, [1.0; 3], args.seed, &input)?;

    let label_a = args
        .model_a
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model-a".into());
    let label_b = args
        .model_b
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model-b".into());

    let mut rows = Vec::new();
    for &threads in &thread_counts {
        rows.push(bench_deface(
            &store_a,
            &config_a,
            &label_a,
            threads,
            &bench_config,
            &input,
            &out_dir,
        )?);
        rows.push(bench_deface(
            &store_b,
            &config_b,
            &label_b,
            threads,
            &bench_config,
            &input,
            &out_dir,
        )?);
    }
    if let Some(template) = &args.external {
        rows.push(bench_external(template, &bench_config, &input, &out_dir)?);
    }

    print!("{}", format_table(&rows));
    let (a, b) = (&rows[0], &rows[1]);
    println!(
        "speedup {} over {} (single run basis, {} threads): {:.2}x",
        a.label,
        b.label,
        a.threads,
        speedup(a, b)
    );
    Ok(())
}

pub fn inspect(input: &Path) -> Result<()> {
    let header = read_nifti_header(input)?;
    let dims = header.volume_dims()?;
    let spacing = header.volume_spacing()?;
    println!("file:        {}", input.display());
    println!(
        "magic:       {:?}",
        String::from_utf8_lossy(&header.magic).trim_end_matches('\0')
    );
    println!(
        "byte order:  {}",
        if header.little_endian {
            "little-endian"
        } else {
            "big-endian"
        }
    );
    println!("dim:         {:?} (ndim {})", &header.dim[1..=3], header.dim[0]);
    println!("volume dims: {}x{}x{} (D,H,W)", dims[0], dims[1], dims[2]);
    println!(
        "spacing mm:  {:.4} x {:.4} x {:.4} (D,H,W)",
        spacing[0], spacing[1], spacing[2]
    );
    println!(
        "datatype:    {} (bitpix {})",
        header.datatype.name(),
        header.bitpix
    );
    println!("vox_offset:  {}", header.vox_offset);
    println!(
        "scl:         slope {} inter {}",
        header.scl_slope, header.scl_inter
    );
    println!("sform_code:  {}", header.sform_code);
    Ok(())
}

pub fn summary(model: &Path) -> Result<()> {
    let (store, _) = load_weights(model)?;
    let config = ModelConfig::infer_from_store(&store)?;
    print!("{}", model_summary(&config, &store));
    Ok(())
}
