//! The `sphmark` command line.
//!
//! Every command takes `--config <file.json>`, a flat JSON object whose keys
//! are the long flag names with `-` replaced by `_`; flags given on the
//! command line win. Exit codes: 0 success, 1 validation error, 2 I/O error,
//! 3 numerical-contract violation. `SPHMARK_THREADS` caps parallelism.

pub mod protocol;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use crate::attacks::Distortion;
use crate::codec::{
    compute_features, embed, extract_with_key, synthetic_cover, CodecConfig, DecisionRule, Payload,
};
use crate::decoder::{
    accuracy, decode, generate_dataset, train, AblationConfig, FeatureKind, HostFamily, LinearDecoder, TrainConfig,
};
use crate::error::{Error, Result};
use crate::grid::ErpImage;
use crate::harmonics::forward_sht;
use crate::io;
use crate::metrics::{bit_accuracy, psnr, ssim, MetricReport};

/// Extractions whose symbol consistency falls below this are flagged; a
/// wrong key gives about `2 / pi`.
pub const LOW_CONFIDENCE: f64 = 0.8;
/// Largest admissible deviation of the algebraic invariance check.
pub const INVARIANCE_TOLERANCE: f64 = 1e-9;

const ATTACK_GRAMMAR: &str = "\
Attack specs: KIND[:NAME=VALUE,...]
  identity | none
  rotate:q=W,X,Y,Z | rotate:zyz=A,B,G | rotate:axis=X,Y,Z,angle=T | rotate:random | rotate:seed=N
  blur:sigma=S,k=K           spatial Gaussian, K odd (default sigma=3,k=7)
  heat:sigma=S,lmax=L        exact spectral heat-kernel blur
  noise:std=S[,seed=N]       additive Gaussian noise
  lowpass:lc=L[,lmax=M]      spherical-harmonic truncation
  resize:scale=S             bilinear down- and up-sampling
  brightness:f=F             x * F
  contrast:f=F               mean + F (x - mean), F in [0.5, 1.5]
  jpeg:q=Q                   8x8 DCT quantization, Q in 1..=100
  mixed:[SPEC;SPEC;...]      applied left to right
Angles are in radians. Unseeded stochastic steps draw from --seed.";

const KNOWN_KEYS: &[&str] = &[
    "l_max", "embed_degrees", "bits", "alpha", "groups", "geometric_mask", "texture_mask", "mask_floor",
    "decision", "gain_compensation", "key", "seed", "height", "payload", "covers", "axes", "angles", "rotations", "alphas",
    "attacks", "train_samples", "test_samples", "epochs", "learning_rate", "batch_size", "payload_sizes",
    "jitter", "host_seed", "features",
];

#[derive(Debug, Parser)]
#[command(name = "sphmark", version, about = "Rotation-invariant watermarking of spherical panoramas")]
struct Cli {
    /// JSON file with default values for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Watermark an image and write its side information.
    Embed(EmbedArgs),
    /// Recover a payload with side information or a decoder checkpoint.
    Extract(ExtractArgs),
    /// Apply a distortion to an image.
    #[command(after_help = ATTACK_GRAMMAR)]
    Attack(AttackArgs),
    /// Bit accuracy against rotation angle, plus the algebraic invariance check.
    Invariance(InvarianceArgs),
    /// Attack grid, fidelity and strength trade-off over synthetic covers.
    #[command(after_help = ATTACK_GRAMMAR)]
    Bench(BenchArgs),
    /// Train a blind decoder on the synthetic benchmark.
    TrainDecoder(TrainArgs),
    /// Compare bispectrum and power-spectrum blind decoders.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Default)]
struct CodecArgs {
    #[arg(long)]
    l_max: Option<usize>,
    /// Comma-separated degrees carrying the payload.
    #[arg(long, value_delimiter = ',')]
    embed_degrees: Option<Vec<usize>>,
    #[arg(long)]
    bits: Option<usize>,
    /// Per-bit strength relative to the cover's coefficient RMS.
    #[arg(long)]
    alpha: Option<f64>,
    /// Feature groups (0 = one per bit).
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    geometric_mask: Option<bool>,
    #[arg(long)]
    texture_mask: Option<bool>,
    #[arg(long)]
    mask_floor: Option<f64>,
    /// zf (zero-forcing) or matched.
    #[arg(long)]
    decision: Option<DecisionRule>,
    /// Fit per-triplet gains alongside the bits (zero-forcing only).
    #[arg(long)]
    gain_compensation: Option<bool>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Cover image (PPM/PGM).
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Use the bundled synthetic cover with this seed instead of a file.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Height of the synthetic cover.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    output: PathBuf,
    /// Side-information stem (default: output path without extension).
    #[arg(long)]
    side: Option<PathBuf>,
    /// Hex (0x...) or bit string; random from --seed when absent.
    #[arg(long)]
    payload: Option<String>,
    #[arg(long)]
    key: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the watermarked image's coefficients.
    #[arg(long)]
    coef: Option<PathBuf>,
    /// CSV metric report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    /// Side information (`<name>.sig.json`).
    #[arg(long, required_unless_present = "checkpoint")]
    side: Option<PathBuf>,
    /// Blind decoder checkpoint (JSON).
    #[arg(long, conflicts_with = "side")]
    checkpoint: Option<PathBuf>,
    /// Key to extract with; defaults to the key in the side information.
    #[arg(long)]
    key: Option<u64>,
    /// Expected payload; reports bit accuracy.
    #[arg(long)]
    expect: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    spec: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InvarianceArgs {
    #[arg(long)]
    height: Option<usize>,
    /// Random axes per angle.
    #[arg(long)]
    axes: Option<usize>,
    /// Comma-separated rotation angles (radians).
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    /// Synthetic covers cycled through the trials.
    #[arg(long)]
    covers: Option<usize>,
    /// Random rotations of the algebraic check.
    #[arg(long)]
    rotations: Option<usize>,
    #[arg(long)]
    key: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    covers: Option<usize>,
    /// Attack spec; repeat for several (default: the standard grid).
    #[arg(long = "attack")]
    attacks: Option<Vec<String>>,
    /// Comma-separated strengths for the trade-off curve.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    key: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for attacks.csv and fidelity.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args, Default)]
struct TrainingArgs {
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    key: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Host perturbation scale of the benchmark family.
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    host_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// bispectrum or power.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch loss curve (CSV).
    #[arg(long)]
    curve: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    payload_sizes: Option<Vec<usize>>,
    /// CSV output (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    codec: CodecArgs,
}

/// Values from `--config`, consulted for any flag left unset.
struct FileConfig(Map<String, Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(Map::new()));
        };
        let value: Value = serde_json::from_slice(&io::read_file(path)?)?;
        let Value::Object(map) = value else {
            return Err(Error::InvalidArgument(format!("{}: config must be a JSON object", path.display())));
        };
        if let Some(bad) = map.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("{}: unknown config key '{bad}'", path.display())));
        }
        Ok(Self(map))
    }

    fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("config key '{key}': {e}"))),
        }
    }

    fn codec(&self, a: CodecArgs) -> Result<CodecConfig> {
        let d = CodecConfig::default();
        let decision = match a.decision {
            Some(r) => r,
            None => match self.0.get("decision").and_then(Value::as_str) {
                Some(s) => s.parse()?,
                None => d.decision,
            },
        };
        let cfg = CodecConfig {
            l_max: self.pick(a.l_max, "l_max", d.l_max)?,
            embed_degrees: self.pick(a.embed_degrees, "embed_degrees", d.embed_degrees)?,
            bits: self.pick(a.bits, "bits", d.bits)?,
            alpha: self.pick(a.alpha, "alpha", d.alpha)?,
            groups: self.pick(a.groups, "groups", d.groups)?,
            use_geometric_mask: self.pick(a.geometric_mask, "geometric_mask", d.use_geometric_mask)?,
            use_texture_mask: self.pick(a.texture_mask, "texture_mask", d.use_texture_mask)?,
            mask_floor: self.pick(a.mask_floor, "mask_floor", d.mask_floor)?,
            decision,
            gain_compensation: self.pick(a.gain_compensation, "gain_compensation", d.gain_compensation)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn training(&self, a: TrainingArgs) -> Result<(HostFamily, TrainConfig, u64, usize, usize)> {
        let fam = HostFamily::default();
        let tc = TrainConfig::default();
        let ab = AblationConfig::default();
        let family = HostFamily {
            host_seed: self.pick(a.host_seed, "host_seed", fam.host_seed)?,
            jitter: self.pick(a.jitter, "jitter", fam.jitter)?,
            channels: fam.channels,
        };
        let train = TrainConfig {
            learning_rate: self.pick(a.learning_rate, "learning_rate", tc.learning_rate)?,
            epochs: self.pick(a.epochs, "epochs", tc.epochs)?,
            batch_size: self.pick(a.batch_size, "batch_size", tc.batch_size)?,
            seed: self.pick(a.seed, "seed", tc.seed)?,
        };
        let key = self.pick(a.key, "key", ab.key)?;
        let n_train = self.pick(a.train_samples, "train_samples", ab.train_samples)?;
        let n_test = self.pick(a.test_samples, "test_samples", ab.test_samples)?;
        Ok((family, train, key, n_train, n_test))
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPHMARK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("SPHMARK_THREADS must be a positive integer, got '{v}'")))?;
    // A pool may already exist when `run` is called more than once in a process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Embed(a) => cmd_embed(a, &file),
        Command::Extract(a) => cmd_extract(a),
        Command::Attack(a) => cmd_attack(a, &file),
        Command::Invariance(a) => cmd_invariance(a, &file),
        Command::Bench(a) => cmd_bench(a, &file),
        Command::TrainDecoder(a) => cmd_train_decoder(a, &file),
        Command::Ablate(a) => cmd_ablate(a, &file),
    }
}

/// CSV body prefixed with the tool version and the configuration echo.
pub fn with_header(config: &Value, body: &str) -> String {
    format!("# sphmark {}\n# config {}\n{body}", env!("CARGO_PKG_VERSION"), config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_file(path, text.as_bytes())
}

fn read_image(path: &Path) -> Result<ErpImage> {
    io::read_ppm(path)
}

fn cmd_embed(a: EmbedArgs, file: &FileConfig) -> Result<()> {
    let cfg = file.codec(a.codec)?;
    let key = file.pick(a.key, "key", 0)?;
    let seed = file.pick(a.seed, "seed", 0)?;
    let height = file.pick(a.height, "height", 64)?;
    let payload_str = file.pick_opt(a.payload, "payload")?;
    let (cover, source) = match (&a.input, a.synthetic) {
        (Some(p), _) => (read_image(p)?, json!(p.display().to_string())),
        (None, Some(s)) => (synthetic_cover(height, cfg.l_max, 3, s)?, json!({ "synthetic": s, "height": height })),
        (None, None) => return Err(Error::invalid("embed needs --input or --synthetic")),
    };
    let payload = match &payload_str {
        Some(s) => Payload::parse(s)?,
        None => Payload::random(cfg.bits, seed),
    };
    let out = embed(&cover, &payload, key, &cfg)?;
    if let Some(w) = &out.warning {
        eprintln!("warning: {w}");
    }
    io::write_ppm(&a.output, &out.image)?;
    let stem = a.side.clone().unwrap_or_else(|| a.output.with_extension(""));
    let (side_json, side_bin) = io::write_side_info(&stem, &out.side)?;
    if let Some(p) = &a.coef {
        io::write_coef(p, &forward_sht(&out.image, cfg.l_max))?;
    }

    let config = json!({
        "command": "embed",
        "codec": cfg,
        "key": key,
        "seed": seed,
        "cover": source,
        "payload": payload.to_hex(),
        "output": a.output.display().to_string(),
    });
    let mut report = MetricReport::new(config.clone(), vec![seed]);
    report.insert("psnr_db", psnr(&cover, &out.image)?);
    report.insert("ssim", ssim(&cover, &out.image)?);
    report.insert("clamp_loss", out.clamp_loss);
    report.insert("amplitude", out.side.amplitude);
    if let Some(p) = &a.report {
        write_text(p, &with_header(&config, &report.to_csv()))?;
    }
    println!("payload hex  {}", payload.to_hex());
    println!("payload bits {}", payload.to_bit_string());
    println!("image        {}", a.output.display());
    println!("side info    {} + {}", side_json.display(), side_bin.display());
    print!("{}", report.summary());
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let y = read_image(&a.input)?;
    let expect = a.expect.as_deref().map(Payload::parse).transpose()?;
    let (payload, stats, label, config) = if let Some(side_path) = &a.side {
        let side = io::read_side_info(side_path)?;
        let key = a.key.unwrap_or(side.key);
        if key != side.key {
            eprintln!("warning: key {key} differs from the key the side information was made with");
        }
        let cfg = side.config.clone();
        let e = extract_with_key(&y, &side, key, &cfg)?;
        println!("consistency  {:.4}", e.consistency);
        if e.consistency < LOW_CONFIDENCE {
            eprintln!(
                "warning: low confidence: symbol consistency {:.3} < {LOW_CONFIDENCE} (wrong key, unmarked image or heavy distortion?)",
                e.consistency
            );
        }
        let config = json!({ "command": "extract", "mode": "side_info", "codec": cfg, "key": key });
        (e.payload, e.statistics, "statistic", config)
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces one source");
        let dec = LinearDecoder::from_json(&String::from_utf8_lossy(&io::read_file(path)?))?;
        let cfg: CodecConfig = dec
            .config
            .get("codec")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Format(format!("{}: checkpoint lacks a codec config", path.display())))?;
        let kind: FeatureKind = dec
            .config
            .get("features")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or(FeatureKind::Bispectrum);
        let features = match kind {
            FeatureKind::Bispectrum => compute_features(&y, &cfg)?,
            FeatureKind::Power => crate::codec::power_features_from_coeffs(&forward_sht(&y, cfg.l_max), &cfg)?,
        };
        let d = decode(&dec, &features)?;
        let config = json!({ "command": "extract", "mode": "blind", "codec": cfg, "features": kind });
        (d.payload, d.probabilities, "probability", config)
    };
    println!("payload hex  {}", payload.to_hex());
    println!("payload bits {}", payload.to_bit_string());
    for (i, s) in stats.iter().enumerate() {
        println!("bit {i:>3} {} {label} {s:+.6}", payload.bits[i] as u8);
    }
    let mut report = MetricReport::new(config.clone(), vec![]);
    if let Some(w) = &expect {
        let acc = bit_accuracy(w, &payload)?;
        println!("accuracy     {acc:.4}");
        report.insert("bit_accuracy", acc);
    }
    if let Some(p) = &a.report {
        let mut body = format!("bit,value,{label}\n");
        for (i, s) in stats.iter().enumerate() {
            body.push_str(&format!("{i},{},{s}\n", payload.bits[i] as u8));
        }
        write_text(p, &with_header(&config, &body))?;
    }
    Ok(())
}

fn cmd_attack(a: AttackArgs, file: &FileConfig) -> Result<()> {
    let seed = file.pick(a.seed, "seed", 0)?;
    let spec: Distortion = a.spec.parse()?;
    let x = read_image(&a.input)?;
    let y = spec.apply(&x, seed)?;
    io::write_ppm(&a.output, &y)?;
    println!("applied {spec} -> {}", a.output.display());
    Ok(())
}

fn cmd_invariance(a: InvarianceArgs, file: &FileConfig) -> Result<()> {
    let cfg = file.codec(a.codec)?;
    let height = file.pick(a.height, "height", 64)?;
    let axes = file.pick(a.axes, "axes", 100)?;
    let angles = file.pick(a.angles, "angles", protocol::DEFAULT_ANGLES.to_vec())?;
    let covers = file.pick(a.covers, "covers", 5)?;
    let rotations = file.pick(a.rotations, "rotations", 100)?;
    let key = file.pick(a.key, "key", 0)?;
    let seed = file.pick(a.seed, "seed", 0)?;

    let deviation = protocol::algebraic_invariance(cfg.l_max, 1, rotations, seed)?;
    let marked = protocol::mark_covers(&cfg, height, key, covers, seed)?;
    let rows = protocol::rotation_sweep(&marked, &cfg, &angles, axes, seed)?;
    let config = json!({
        "command": "invariance", "codec": cfg, "height": height, "axes": axes, "angles": angles,
        "covers": covers, "rotations": rotations, "key": key, "seed": seed,
    });
    let csv = with_header(
        &config,
        &format!("# algebraic_max_deviation {deviation:e}\n{}", protocol::sweep_csv(&rows)),
    );
    match &a.output {
        Some(p) => {
            write_text(p, &csv)?;
            let mean: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
            let spread = mean.iter().copied().fold(f64::MIN, f64::max) - mean.iter().copied().fold(f64::MAX, f64::min);
            println!("algebraic max deviation {deviation:.3e} (tolerance {INVARIANCE_TOLERANCE:e})");
            for r in &rows {
                println!("angle {:.3}  mean acc {:.4}  min {:.4}", r.angle, r.mean_accuracy, r.min_accuracy);
            }
            println!("spread across angles {spread:.4}");
        }
        None => print!("{csv}"),
    }
    if deviation > INVARIANCE_TOLERANCE {
        return Err(Error::Numerical(format!(
            "algebraic invariance deviation {deviation:e} exceeds {INVARIANCE_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, file: &FileConfig) -> Result<()> {
    let cfg = file.codec(a.codec)?;
    let height = file.pick(a.height, "height", 64)?;
    let covers = file.pick(a.covers, "covers", 20)?;
    let key = file.pick(a.key, "key", 0)?;
    let seed = file.pick(a.seed, "seed", 0)?;
    let specs = file.pick(
        a.attacks,
        "attacks",
        protocol::DEFAULT_ATTACKS.iter().map(|s| s.to_string()).collect(),
    )?;
    let alphas = file.pick(a.alphas, "alphas", protocol::DEFAULT_ALPHAS.to_vec())?;
    let attacks = specs.iter().map(|s| s.parse()).collect::<Result<Vec<Distortion>>>()?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let config = json!({
        "command": "bench", "codec": cfg, "height": height, "covers": covers, "key": key,
        "seed": seed, "attacks": specs, "alphas": alphas,
    });
    let marked = protocol::mark_covers(&cfg, height, key, covers, seed)?;
    let grid = protocol::attack_grid(&marked, &cfg, &attacks, seed)?;
    let curve = protocol::alpha_curve(&cfg, height, key, covers, &alphas, seed)?;
    let base = protocol::fidelity(&marked, cfg.alpha)?;
    write_text(&a.out_dir.join("attacks.csv"), &with_header(&config, &protocol::attack_csv(&grid)))?;
    write_text(
        &a.out_dir.join("fidelity.csv"),
        &with_header(&config, &protocol::fidelity_csv(&curve)),
    )?;
    println!(
        "embedding at alpha {}: PSNR {:.2} dB (min {:.2}), SSIM {:.4} (min {:.4})",
        cfg.alpha, base.mean_psnr, base.min_psnr, base.mean_ssim, base.min_ssim
    );
    println!("{:<60} {:>8} {:>8} {:>10}", "attack", "acc", "min", "cosine");
    for r in &grid {
        println!(
            "{:<60} {:>8.4} {:>8.4} {:>10.6}",
            r.attack, r.mean_accuracy, r.min_accuracy, r.mean_cosine
        );
    }
    println!("reports written to {}", a.out_dir.display());
    Ok(())
}

fn parse_kind(s: &str) -> Result<FeatureKind> {
    match s {
        "bispectrum" => Ok(FeatureKind::Bispectrum),
        "power" => Ok(FeatureKind::Power),
        _ => Err(Error::invalid(format!("unknown feature kind '{s}' (expected bispectrum or power)"))),
    }
}

fn cmd_train_decoder(a: TrainArgs, file: &FileConfig) -> Result<()> {
    let cfg = file.codec(a.codec)?;
    let kind = parse_kind(&file.pick(a.features, "features", "bispectrum".to_string())?)?;
    let (family, tc, key, n_train, n_test) = file.training(a.training)?;
    let train_set = generate_dataset(&family, &cfg, key, 0, n_train, kind)?;
    let test_set = generate_dataset(&family, &cfg, key, n_train as u64, n_test, kind)?;
    let (mut dec, run) = train(&train_set, &tc).inspect_err(|e| {
        if let Error::Diverged { .. } = e {
            eprintln!("hint: lower --learning-rate (was {})", tc.learning_rate);
        }
    })?;
    let config = json!({
        "command": "train-decoder", "codec": cfg, "features": kind, "family": family, "train": tc,
        "key": key, "train_samples": n_train, "test_samples": n_test,
    });
    dec.config = config.clone();
    io::write_file(&a.checkpoint, format!("{}\n", dec.to_json()?).as_bytes())?;
    if let Some(p) = &a.curve {
        write_text(p, &with_header(&config, &run.to_csv()))?;
    }
    let held_out = accuracy(&dec, &test_set)?;
    let last = run.curve.last().expect("at least one epoch");
    println!("final train loss {:.6} (best epoch {})", last.loss, run.best_epoch);
    println!("held-out accuracy {held_out:.4}");
    println!("checkpoint {}", a.checkpoint.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs, file: &FileConfig) -> Result<()> {
    let cfg = file.codec(a.codec)?;
    let (family, train, key, train_samples, test_samples) = file.training(a.training)?;
    let payload_sizes = file.pick(a.payload_sizes, "payload_sizes", AblationConfig::default().payload_sizes)?;
    let ab = AblationConfig {
        family,
        key,
        payload_sizes,
        train_samples,
        test_samples,
        train,
    };
    let report = crate::decoder::ablate_power_spectrum(&cfg, &ab)?;
    let config = json!({ "command": "ablate", "codec": cfg, "ablation": ab });
    let csv = with_header(&config, &report.to_csv());
    match &a.output {
        Some(p) => {
            write_text(p, &csv)?;
            for r in &report.rows {
                println!(
                    "bits {:>3}: bispectrum {:.4} ({} features), power {:.4} ({} features)",
                    r.bits, r.bispectrum_accuracy, r.bispectrum_features, r.power_accuracy, r.power_features
                );
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}
