use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfnns::attack::{apply_exact, AttackKind, AttackSpec};
use rfnns::config::{parse_config, RunConfig};
use rfnns::error::Error;
use rfnns::image::{load_image, save_image, ImageTensor};
use rfnns::keyed::generate_cover;
use rfnns::metrics::QualityReport;
use rfnns::pipeline::{
    demo_secret, embed, eval_csv, evaluate, extract, EvalRow, ExtractOptions, Manifest,
};
use rfnns::rspg::LossRecord;
use rfnns::texture::select_blocks;

#[derive(Parser)]
#[command(name = "rfnns", version, about = "Keyed-cover image steganography with a fixed random decoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set mu=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Cover key k_c.
    #[arg(long, global = true)]
    kc: Option<u64>,
    /// Decoder weight key k_w.
    #[arg(long, global = true)]
    kw: Option<u64>,
    #[arg(long, global = true)]
    prompt: Option<String>,
    /// Capacity profile: desk, low, high, payload-0.375, payload-13.5, payload-24.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Train against the attack suite.
    #[arg(long, global = true)]
    robust: bool,
    /// Training attack suite, e.g. `jpeg:80,contrast:0.7`.
    #[arg(long, global = true)]
    suite: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the keyed cover for (k_c, prompt).
    GenCover {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-block texture complexity as CSV.
    AnalyzeTexture {
        /// Image to analyze; the keyed cover when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the block mask (white = selected).
        #[arg(long)]
        mask_png: Option<PathBuf>,
    },
    /// Hide a secret; writes stego.png, manifest.txt, trace.csv and config.txt.
    Embed {
        /// Secret image; a generated test image when omitted.
        #[arg(long)]
        secret: Option<PathBuf>,
        /// External cover instead of the keyed one.
        #[arg(long)]
        cover: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Recover the secret from a stego image.
    Extract {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// External cover used at embedding time.
        #[arg(long)]
        cover: Option<PathBuf>,
        /// 3x3 box blur on the recovered secret.
        #[arg(long)]
        denoise: bool,
        /// Refuse a stego that is not bit-identical to the embedded one.
        #[arg(long)]
        verify_stego: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Apply one channel attack to an image.
    Attack {
        #[arg(long)]
        input: PathBuf,
        /// identity, jpeg, gaussian_noise, contrast, rotation, ...
        #[arg(long)]
        kind: String,
        #[arg(long)]
        param: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Embed, attack and extract over several trials; writes a CSV.
    Evaluate {
        /// Secret images, used round-robin over trials.
        #[arg(long)]
        secret: Vec<PathBuf>,
        /// Evaluation attacks, e.g. `identity:0,jpeg:80`.
        #[arg(long)]
        attacks: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        /// known, unknown or any.
        #[arg(long)]
        mode: Option<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the evaluation once per ablation arm; one CSV per arm.
    Ablate {
        #[arg(long)]
        secret: Vec<PathBuf>,
        #[arg(long)]
        attacks: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn run_config(c: &Common, cover: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(Failure::from);
    if let Some(v) = c.kc {
        set("cover_key", v.to_string())?;
    }
    if let Some(v) = c.kw {
        set("weight_key", v.to_string())?;
    }
    if let Some(v) = &c.prompt {
        set("prompt", v.clone())?;
    }
    if let Some(v) = &c.profile {
        set("profile", v.clone())?;
    }
    if let Some(v) = c.iterations {
        set("iterations", v.to_string())?;
    }
    if c.robust {
        set("robust", "true".into())?;
    }
    if let Some(v) = &c.suite {
        set("suite", v.clone())?;
    }
    if let Some(p) = cover {
        set("cover", p.display().to_string())?;
    }
    for kv in &c.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        let k = k.trim();
        if !rfnns::config::KEYS.contains(&k) {
            return Err(Failure::Usage(format!("unknown config key '{k}'")));
        }
        set(k, v.to_string())?;
    }
    Ok(cfg)
}

fn secrets(cfg: &RunConfig, paths: &[PathBuf]) -> CliResult<Vec<ImageTensor>> {
    let side = cfg.capacity_profile()?.secret_side;
    if paths.is_empty() {
        return Ok(vec![demo_secret(cfg.secret_key, side)?]);
    }
    paths
        .iter()
        .map(|p| Ok(load_image(p)?.quantize8()))
        .collect()
}

fn trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn summarize(rows: &[EvalRow]) {
    let mut seen: Vec<String> = Vec::new();
    for r in rows {
        let label = r.attack.to_string();
        if seen.contains(&label) {
            continue;
        }
        let group: Vec<&EvalRow> = rows.iter().filter(|x| x.attack.to_string() == label).collect();
        let n = group.len() as f64;
        let psnr = group.iter().map(|x| x.secret.psnr).sum::<f64>() / n;
        let ssim = group.iter().map(|x| x.secret.ssim).sum::<f64>() / n;
        println!("{label:>24}  secret psnr {psnr:6.2} dB  ssim {ssim:.3}");
        seen.push(label);
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn run(command: Command, common: &Common) -> CliResult<()> {
    match command {
        Command::GenCover { output } => {
            let cfg = run_config(common, None)?;
            let side = cfg.capacity_profile()?.cover_side;
            let cover = generate_cover(&cfg.keys, side, side)?;
            save_image(&cover, &output, 8)?;
            println!("wrote {} ({side}x{side})", output.display());
        }
        Command::AnalyzeTexture {
            image,
            output,
            mask_png,
        } => {
            let cfg = run_config(common, None)?;
            let img = match &image {
                Some(p) => load_image(p)?,
                None => {
                    let side = cfg.capacity_profile()?.cover_side;
                    generate_cover(&cfg.keys, side, side)?
                }
            }
            .quantize8();
            let (map, mask) = select_blocks(&img, cfg.block_size, cfg.threshold)?;
            let mut csv = String::from("block_row,block_col,O,selected\n");
            for r in 0..map.grid.rows {
                for c in 0..map.grid.cols {
                    csv.push_str(&format!(
                        "{r},{c},{:.6},{}\n",
                        map.get(r, c),
                        u8::from(mask.is_selected(r, c))
                    ));
                }
            }
            write_file(&output, &csv)?;
            if let Some(p) = mask_png {
                save_image(&mask.to_image(), &p, 8)?;
            }
            println!(
                "{} of {} blocks selected at T = {}",
                mask.count(),
                map.grid.len(),
                cfg.threshold
            );
        }
        Command::Embed {
            secret,
            cover,
            output,
        } => {
            let cfg = run_config(common, cover.as_deref())?;
            let secret = secrets(&cfg, secret.as_slice())?.remove(0);
            let ec = cfg.embed_config()?;
            let out = embed(&secret, &ec)?;
            ensure_dir(&output)?;
            save_image(&out.stego, output.join("stego.png"), 8)?;
            out.manifest.save(output.join("manifest.txt"))?;
            write_file(&output.join("trace.csv"), &trace_csv(&out.optimization.trace))?;
            write_file(&output.join("config.txt"), &cfg.to_record_text())?;
            let q = QualityReport::compare(&out.prepared.cover, &out.stego)?;
            println!(
                "stego psnr {:.2} dB ssim {:.4}; {} of {} blocks carry the payload; best iteration {}",
                q.psnr,
                q.ssim,
                out.prepared.mask.count(),
                out.prepared.mask.grid.len(),
                out.optimization.best_iteration
            );
        }
        Command::Extract {
            stego,
            manifest,
            cover,
            denoise,
            verify_stego,
            output,
        } => {
            let cfg = run_config(common, None)?;
            let manifest = Manifest::load(&manifest)?;
            let stego = load_image(&stego)?;
            let secret = extract(
                &stego,
                &manifest,
                &cfg.keys,
                &ExtractOptions {
                    external_cover: cover,
                    denoise: denoise || cfg.denoise,
                    verify_stego,
                },
            )?;
            save_image(&secret, &output, 8)?;
            println!("wrote {}", output.display());
        }
        Command::Attack {
            input,
            kind,
            param,
            seed,
            output,
        } => {
            let kind: AttackKind = kind.parse()?;
            let spec = AttackSpec::new(kind, param)?.with_seed(seed);
            let img = load_image(&input)?;
            let attacked = apply_exact(&spec, &img)?;
            save_image(&attacked, &output, 8)?;
            let q = QualityReport::compare(&img.quantize8(), &attacked)?;
            println!("{spec}: psnr {:.2} dB ssim {:.4}", q.psnr, q.ssim);
        }
        Command::Evaluate {
            secret,
            attacks,
            trials,
            mode,
            output,
        } => {
            let mut cfg = run_config(common, None)?;
            if let Some(a) = attacks {
                cfg.set("eval_attacks", &a)?;
            }
            if let Some(t) = trials {
                cfg.set("trials", &t.to_string())?;
            }
            if let Some(m) = mode {
                cfg.set("eval_mode", &m)?;
            }
            let secrets = secrets(&cfg, &secret)?;
            let rows = evaluate(
                &cfg.embed_config()?,
                &secrets,
                &cfg.eval_attacks,
                cfg.trials,
                cfg.eval_mode,
            )?;
            write_file(&output, &eval_csv(&rows))?;
            summarize(&rows);
        }
        Command::Ablate {
            secret,
            attacks,
            trials,
            output,
        } => {
            let mut cfg = run_config(common, None)?;
            if let Some(a) = attacks {
                cfg.set("eval_attacks", &a)?;
            }
            if let Some(t) = trials {
                cfg.set("trials", &t.to_string())?;
            }
            let secrets = secrets(&cfg, &secret)?;
            ensure_dir(&output)?;
            type Arm = (&'static str, fn(&mut RunConfig));
            let arms: [Arm; 4] = [
                ("baseline", |_| {}),
                ("no_localization", |c| c.ablation.disable_localization = true),
                ("no_rspg", |c| c.ablation.disable_rspg = true),
                ("no_steganalysis", |c| c.ablation.disable_steganalysis_term = true),
            ];
            for (name, arm) in arms {
                let mut c = cfg.clone();
                arm(&mut c);
                let rows = evaluate(
                    &c.embed_config()?,
                    &secrets,
                    &c.eval_attacks,
                    c.trials,
                    rfnns::pipeline::EvalMode::Any,
                )?;
                write_file(&output.join(format!("{name}.csv")), &eval_csv(&rows))?;
                println!("[{name}]");
                summarize(&rows);
            }
        }
    }
    Ok(())
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("RFNNS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("RFNNS_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
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
    let result = init_threads().and_then(|_| run(cli.command, &cli.common));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
