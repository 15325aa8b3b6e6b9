//! Command line. Every subcommand reads an optional `--config` file of
//! `key=value` lines, then `--set key=value` overrides, then explicit flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tokenct_core::drr::View;
use tokenct_core::preprocess::{HuWindow, PreprocessConfig};
use tokenct_core::translator::{Span, Strategy};

use crate::dataset::{preprocess_dir, project_dir, write_raw, Manifest};
use crate::error::{Error, Result};
use crate::io::export::{export_slice_png, read_radiograph};
use crate::io::text::{parse_list, write_token_lines, Config};
use crate::io::{read_rvol, write_rvol};
use crate::pipeline::{reconstruct, tokenize_dir, Models, TOKENS};
use crate::training::{evaluate_reconstruction, train_stage, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "tokenct", version, about = "Chest radiographs to CT volumes through discrete tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat key=value settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic thorax phantoms
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Resample, crop, resize and normalize raw volumes
    Preprocess {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Digitally reconstructed radiographs
    #[command(subcommand)]
    Drr(DrrCmd),
    /// Train one stage: vq2d, vq3d or gpt
    Train {
        stage: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Token grids of every sample under the trained autoencoders
    Tokenize {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Radiographs to a CT volume
    Reconstruct {
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        pa: Option<PathBuf>,
        #[arg(long)]
        lat: Option<PathBuf>,
        /// `pa,lat` for biplanar, `pa` for monoplanar
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the full token sequence, one token per line
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Also write the middle axial slice as PNG
        #[arg(long)]
        png: Option<PathBuf>,
        /// `greedy` or `topk`
        #[arg(long)]
        strategy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a reconstruction with its reference volume
    Eval {
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand, Debug)]
enum PhantomCmd {
    /// Write raw phantoms and a split manifest
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train, validation and test fractions, e.g. 0.7,0.2,0.1
        #[arg(long)]
        fractions: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand, Debug)]
enum DrrCmd {
    /// PA and lateral radiographs of every prepared volume
    Project {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        log_max: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

/// Settings merged from the config file, overrides and flags.
struct Settings {
    cfg: Config,
}

impl Settings {
    fn new(common: &Common, allowed: &[&str]) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for s in &common.set {
            cfg.apply(s)?;
        }
        if !allowed.is_empty() {
            if let Some(k) = cfg.keys().find(|k| !allowed.contains(k)) {
                return Err(Error::Config(format!("unknown setting {k:?}; expected one of {}", allowed.join(", "))));
            }
        }
        Ok(Self { cfg })
    }

    fn flag(&mut self, key: &str, value: Option<impl ToString>) -> &mut Self {
        if let Some(v) = value {
            self.cfg.set(key, v.to_string());
        }
        self
    }

    fn flag_path(&mut self, key: &str, value: &Option<PathBuf>) -> &mut Self {
        self.flag(key, value.as_ref().map(|p| p.display().to_string()))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.cfg.value(key)?.unwrap_or(default))
    }

    fn path(&self, key: &str, default: &str) -> PathBuf {
        self.cfg.get(key).unwrap_or(default).into()
    }

    fn required(&self, key: &str) -> Result<PathBuf> {
        self.cfg.get(key).map(PathBuf::from).ok_or_else(|| usage(format!("--{key} is required")))
    }
}

fn usage(m: String) -> Error {
    tokenct_core::Error::Usage(m).into()
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if argv.len() <= 1 {
        let _ = Cli::command().print_help();
        return 1;
    }
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            eprintln!("\n{}", Cli::command().render_help());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Phantom(PhantomCmd::Gen { out, count, seed, fractions, common }) => {
            let mut s = Settings::new(&common, &["out", "count", "seed", "fractions"])?;
            s.flag_path("out", &out).flag("count", count).flag("seed", seed).flag("fractions", fractions);
            let fr: Vec<f64> = parse_list(s.cfg.get("fractions").unwrap_or("0.7,0.2,0.1")).map_err(Error::Config)?;
            let fr: [f64; 3] = fr.try_into().map_err(|_| Error::Config("fractions needs three values".into()))?;
            let dir = s.path("out", "data");
            let manifest = Manifest::phantoms(s.get("count", 10)?, s.get("seed", 0)?, fr)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_raw(&dir, &manifest)?;
            println!("wrote {} phantoms to {}", manifest.entries.len(), dir.display());
        }
        Command::Preprocess { data, common } => {
            let mut s = Settings::new(&common, &["data", "spacing", "crop", "resize", "window_min", "window_max"])?;
            s.flag_path("data", &data);
            let d = PreprocessConfig::desk_scale();
            let cube = |key: &str, default: [usize; 3]| -> Result<[usize; 3]> {
                match s.cfg.get(key) {
                    None => Ok(default),
                    Some(v) => {
                        let l: Vec<usize> = parse_list(v).map_err(Error::Config)?;
                        l.try_into().map_err(|_| Error::Config(format!("{key} needs three extents")))
                    }
                }
            };
            let pre = PreprocessConfig {
                target_spacing: s.get("spacing", d.target_spacing)?,
                crop_extents: cube("crop", d.crop_extents)?,
                resize_extents: cube("resize", d.resize_extents)?,
                window: HuWindow::new(s.get("window_min", d.window.min)?, s.get("window_max", d.window.max)?)?,
            };
            let n = preprocess_dir(&s.path("data", "data"), &pre)?;
            println!("prepared {n} volumes");
        }
        Command::Drr(DrrCmd::Project { data, log_max, common }) => {
            let mut s = Settings::new(&common, &["data", "log_max"])?;
            s.flag_path("data", &data).flag("log_max", log_max);
            let n = project_dir(&s.path("data", "data"), s.get("log_max", tokenct_core::drr::DEFAULT_LOG_MAX)?)?;
            println!("projected {n} volumes");
        }
        Command::Train { stage, data, checkpoints, epochs, seed, common } => {
            let stage = Stage::parse(&stage).ok_or_else(|| usage(format!("unknown stage {stage:?}; expected vq2d, vq3d or gpt")))?;
            let mut s = Settings::new(&common, &[])?;
            s.flag_path("data", &data).flag_path("checkpoints", &checkpoints).flag("epochs", epochs).flag("seed", seed);
            let cfg = RunConfig::from_config(stage, &s.cfg)?;
            let r = train_stage(&cfg)?;
            for e in &r.reports {
                println!("{}", e.csv_line());
            }
            println!("best epoch {} loss {} -> {}", r.best_epoch, r.best_loss, r.checkpoint.display());
        }
        Command::Tokenize { data, checkpoints, out, common } => {
            let mut s = Settings::new(&common, &["data", "checkpoints", "out", "log_max"])?;
            s.flag_path("data", &data).flag_path("checkpoints", &checkpoints).flag_path("out", &out);
            let ck = s.path("checkpoints", "checkpoints");
            let set = tokenize_dir(&s.path("data", "data"), &ck, s.get("log_max", tokenct_core::drr::DEFAULT_LOG_MAX)?)?;
            let out = s.cfg.get("out").map(PathBuf::from).unwrap_or_else(|| ck.join(TOKENS));
            set.save(&out)?;
            println!("tokenized {} samples into {}", set.records.len(), out.display());
        }
        Command::Reconstruct { checkpoints, pa, lat, views, out, tokens, png, strategy, common } => {
            let keys = ["checkpoints", "pa", "lat", "views", "out", "tokens", "png", "strategy", "temperature", "k", "seed"];
            let mut s = Settings::new(&common, &keys)?;
            s.flag_path("checkpoints", &checkpoints).flag_path("pa", &pa).flag_path("lat", &lat).flag("views", views);
            s.flag_path("out", &out).flag_path("tokens", &tokens).flag_path("png", &png).flag("strategy", strategy);
            reconstruct_cmd(&s)?;
        }
        Command::Eval { truth, pred, common } => {
            let mut s = Settings::new(&common, &["truth", "pred"])?;
            s.flag_path("truth", &truth).flag_path("pred", &pred);
            let m = evaluate_reconstruction(&read_rvol(s.required("truth")?)?, &read_rvol(s.required("pred")?)?)?;
            println!("mae={} psnr={} dice={}", m.mae, m.psnr, m.dice);
        }
    }
    Ok(())
}

fn reconstruct_cmd(s: &Settings) -> Result<()> {
    let views = s.cfg.get("views").unwrap_or("pa,lat");
    let biplanar = match views {
        "pa,lat" => true,
        "pa" => false,
        v => return Err(usage(format!("--views {v:?}: expected pa or pa,lat"))),
    };
    let strategy = match s.cfg.get("strategy").unwrap_or("greedy") {
        "greedy" => Strategy::Greedy,
        "topk" => Strategy::TopK { temperature: s.get("temperature", 1.0)?, k: s.get("k", 10)? },
        v => return Err(usage(format!("--strategy {v:?}: expected greedy or topk"))),
    };
    let models = Models::load(s.path("checkpoints", "checkpoints"))?;
    let pa = read_radiograph(s.required("pa")?, View::PosteriorAnterior, models.log_max)?;
    let lat = if biplanar { Some(read_radiograph(s.required("lat")?, View::Lateral, models.log_max)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(s.get("seed", 0)?);
    let r = reconstruct(&models, &pa, lat.as_ref(), strategy, &mut rng)?;
    let out = s.required("out")?;
    write_rvol(&r.volume, &out)?;
    if let Some(p) = s.cfg.get("tokens") {
        write_token_lines(r.sequence.tokens(), p)?;
    }
    if let Some(p) = s.cfg.get("png") {
        export_slice_png(&r.volume, 0, r.volume.extents()[0] / 2, Path::new(p))?;
    }
    let ct = r.sequence.span(Span::Ct).len();
    println!("{} tokens ({ct} CT) -> {}", r.sequence.len(), out.display());
    Ok(())
}
