use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use ndarray::{Array1, Array2};
use serde_json::json;

use styleinv_core::checkpoint::{
    embedder_checkpoint, embedder_from_checkpoint, encoder_checkpoint, encoder_from_checkpoint, generator_checkpoint,
    generator_from_checkpoint, Checkpoint, Component,
};
use styleinv_core::config::RunConfig;
use styleinv_core::encoders::{broadcast_to_extended, EncoderParams};
use styleinv_core::evaluation::{ablation_csv, ablation_text_table, evaluate_variant, run_ablation, write_json, AblationSetup};
use styleinv_core::field_core::CameraPose;
use styleinv_core::generator::{sample_multiview_batch, synthesize_image, ExtendedLatent, GeneratorParams, StyleLatent};
use styleinv_core::imageio::{load_png, save_png};
use styleinv_core::inversion::{invert_image, optimize_latent, pivotal_tune, InversionMode, InvertConfig};
use styleinv_core::losses::{IdentityEmbedder, PerceptualProxy};
use styleinv_core::rng::{stream, tag};
use styleinv_core::training::{fit, FitOptions, Variant};

use crate::ConfigArgs;

type F = f32;

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::resolve(args.config.as_deref(), &args.overrides)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `config.toml` inside an output directory.
fn snapshot_dir(cfg: &RunConfig, dir: &Path) -> Result<()> {
    Ok(cfg.write_snapshot(dir.join("config.toml"))?)
}

/// `<file>.config.toml` next to a single output file.
fn snapshot_file(cfg: &RunConfig, file: &Path) -> Result<()> {
    let mut name = file.as_os_str().to_owned();
    name.push(".config.toml");
    Ok(cfg.write_snapshot(PathBuf::from(name))?)
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag.clone().or_else(|| cfg.paths.out_dir.clone()).context("no output directory: pass --out")?;
    create_dir(&dir)?;
    Ok(dir)
}

/// Loads the generator named by the config, or builds it from the seeds.
/// The config's generator section is replaced by the loaded one.
fn load_generator(cfg: &mut RunConfig) -> Result<GeneratorParams<F>> {
    let g = match &cfg.paths.generator {
        Some(p) => generator_from_checkpoint(&Checkpoint::load(p)?)
            .with_context(|| format!("loading generator {}", p.display()))?,
        None => {
            info!("no generator checkpoint given; building from seed {}", cfg.seeds.generator);
            cfg.build_generator()?
        }
    };
    cfg.generator = g.config().clone();
    cfg.seeds.generator = g.seed();
    Ok(g)
}

/// Loads the encoder named by the config. Its render settings replace the
/// config's.
fn load_encoder(cfg: &mut RunConfig) -> Result<EncoderParams<F>> {
    let p = cfg.paths.encoder.clone().context("no encoder: pass --encoder")?;
    let (enc, render) =
        encoder_from_checkpoint(&Checkpoint::load(&p)?).with_context(|| format!("loading encoder {}", p.display()))?;
    cfg.render = render;
    cfg.encoder = enc.config().clone();
    Ok(enc)
}

/// Loads an identity embedder from the configured path, or trains it and
/// stores it in `dir` for later runs.
fn embedder(cfg: &mut RunConfig, g: &GeneratorParams<F>, eval: bool, dir: &Path) -> Result<IdentityEmbedder<F>> {
    let (component, path, name) = if eval {
        (Component::EmbedderEval, cfg.paths.embedder_eval.clone(), "embedder_eval.ckpt")
    } else {
        (Component::EmbedderTrain, cfg.paths.embedder_train.clone(), "embedder_train.ckpt")
    };
    if let Some(p) = path {
        return embedder_from_checkpoint(&Checkpoint::load(&p)?, component)
            .with_context(|| format!("loading embedder {}", p.display()));
    }
    let (e, report) = cfg.train_embedder(g, eval)?;
    info!("{} embedder held-out accuracy {:.3}", component.as_str(), report.heldout_accuracy);
    let seed = if eval { cfg.seeds.embedder_eval } else { cfg.embedder.seed };
    let out = dir.join(name);
    embedder_checkpoint(&e, component, seed)?.save(&out)?;
    if eval {
        cfg.paths.embedder_eval = Some(out);
    } else {
        cfg.paths.embedder_train = Some(out);
    }
    Ok(e)
}

/// Parses `start:end:step` into the inclusive list of yaws.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("yaw sweep `{s}` is not start:end:step"))?;
    let [start, end, step] = parts[..] else { bail!("yaw sweep `{s}` is not start:end:step") };
    if !(step > 0.0) || end < start || !start.is_finite() || !end.is_finite() {
        bail!("yaw sweep `{s}` needs start <= end and a positive step");
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

#[derive(Args, Debug)]
pub struct MakeGenerator {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl MakeGenerator {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds.generator = s;
        }
        let g: GeneratorParams<F> = cfg.build_generator()?;
        if let Some(dir) = self.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        generator_checkpoint(&g)?.save(&self.out)?;
        cfg.paths.generator = Some(self.out.clone());
        snapshot_file(&cfg, &self.out)?;
        info!("generator {} written to {}", g.digest(), self.out.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct GenData {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    identities: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the real-image pool instead of synthetic identities.
    #[arg(long)]
    real: bool,
}

impl GenData {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        let g = load_generator(&mut cfg)?;
        let dir = out_dir(&self.out, &cfg)?;
        let mut entries = Vec::new();
        if self.real {
            for (i, img) in cfg.build_real_pool::<F>()?.iter().enumerate() {
                let file = format!("real_{i:05}.png");
                save_png(dir.join(&file), img)?;
                entries.push(json!({ "file": file }));
            }
        } else {
            let ids = sample_multiview_batch(self.identities, self.views, cfg.train.yaw_range, self.seed, &g, &cfg.render)?;
            for (i, id) in ids.iter().enumerate() {
                for (v, (img, pose)) in id.images.iter().zip(&id.poses).enumerate() {
                    let file = format!("id{i:04}_view{v:02}.png");
                    save_png(dir.join(&file), img)?;
                    entries.push(json!({
                        "file": file,
                        "identity": i,
                        "pose": pose,
                        "w": id.latent.values().to_vec(),
                    }));
                }
            }
        }
        write_json(dir.join("manifest.json"), &json!({ "generator": g.digest(), "seed": self.seed, "images": entries }))?;
        snapshot_dir(&cfg, &dir)?;
        info!("{} images written to {}", entries.len(), dir.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run with this config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl Train {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        if let Some(s) = self.steps {
            cfg.train.total_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        let variant = Variant::parse(&self.variant)?;
        cfg.train = variant.apply(&cfg.train);
        cfg.validate()?;
        let g = load_generator(&mut cfg)?;
        let dir = out_dir(&self.out, &cfg)?;
        let embedder = embedder(&mut cfg, &g, false, &dir)?;
        let losses = cfg.loss_modules(embedder);
        let pool = cfg.build_real_pool::<F>()?;
        let opts = FitOptions {
            log_path: Some(dir.join("train.jsonl")),
            checkpoint_dir: Some(dir.join("checkpoints")),
            resume_from: self.resume.clone(),
            stop_after: None,
        };
        snapshot_dir(&cfg, &dir)?;
        let out = fit(&cfg.train, &cfg.encoder, &g, &pool, &losses, &cfg.render, &opts)?;
        let path = dir.join("encoder.ckpt");
        encoder_checkpoint(&out.encoder, &cfg.render, cfg.hash())?.save(&path)?;
        if let Some(last) = out.log.last() {
            info!("step {} loss {:.4}; encoder written to {}", last.step, last.loss, path.display());
        }
        Ok(())
    }
}

fn parse_mode(s: &str) -> Result<InversionMode> {
    Ok(match s {
        "full" => InversionMode::Full,
        "base_only" => InversionMode::BaseOnly,
        "from_mean" => InversionMode::FromMean,
        _ => bail!("unknown inversion mode `{s}` (full, base_only, from_mean)"),
    })
}

#[derive(Args, Debug)]
pub struct Invert {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inclusive `start:end:step` yaws in degrees, e.g. `-35:35:5`.
    #[arg(long, allow_hyphen_values = true)]
    yaw_sweep: Option<String>,
    #[arg(long, default_value = "full")]
    mode: String,
}

impl Invert {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        if self.encoder.is_some() {
            cfg.paths.encoder = self.encoder.clone();
        }
        let sweep = self.yaw_sweep.as_deref().map(parse_sweep).transpose()?;
        let mode = parse_mode(&self.mode)?;
        let g = load_generator(&mut cfg)?;
        let enc = load_encoder(&mut cfg)?;
        let dir = out_dir(&self.out, &cfg)?;
        let x = load_png::<F>(&self.image)?;
        let icfg = InvertConfig { refine_iterations: cfg.train.refine_iterations, mode };
        let r = invert_image(&x, &enc, &g, &cfg.render, &icfg, None)?;
        save_png(dir.join("base.png"), &r.image_base)?;
        save_png(dir.join("refined.png"), &r.image_refined)?;
        let mut views = Vec::new();
        for yaw in sweep.unwrap_or_default() {
            let pose = CameraPose::new(yaw, r.pose.roll, r.pose.radius)?;
            let img = synthesize_image(&r.w_plus_refined, &pose, &g, &cfg.render)?;
            let file = format!("view_{:02}_yaw{:+06.1}.png", views.len(), yaw);
            save_png(dir.join(&file), &img)?;
            views.push(json!({ "yaw": yaw, "file": file }));
        }
        let rows: Vec<Vec<F>> = r.w_plus_refined.values().outer_iter().map(|row| row.to_vec()).collect();
        write_json(
            dir.join("inversion.json"),
            &json!({
                "image": self.image,
                "mode": mode,
                "pose": r.pose,
                "predicted_pose": r.predicted_pose,
                "w_base": r.w_base.values().to_vec(),
                "w_plus": rows,
                "iteration_losses": r.iteration_losses,
                "views": views,
            }),
        )?;
        snapshot_dir(&cfg, &dir)?;
        info!("inversion written to {} ({} novel views)", dir.display(), views.len());
        Ok(())
    }
}

/// Reads `{"w": [...]}` or `{"w_plus": [[...], ...]}` as the rows to render.
fn read_latent(path: &Path, g: &GeneratorParams<F>) -> Result<ExtendedLatent<F>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(w) = v.get("w") {
        let w: Vec<F> = serde_json::from_value(w.clone())?;
        return Ok(broadcast_to_extended(&StyleLatent::from_values(Array1::from_vec(w))?, g.num_layers()));
    }
    let rows: Vec<Vec<F>> = serde_json::from_value(v.get("w_plus").context("latent file needs `w` or `w_plus`")?.clone())?;
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        bail!("`w_plus` rows differ in length");
    }
    let flat: Vec<F> = rows.iter().flatten().copied().collect();
    let latent = ExtendedLatent::from_values(Array2::from_shape_vec((rows.len(), d), flat)?)?;
    if latent.num_layers() != g.num_layers() || latent.dim() != g.latent_dim() {
        bail!("latent is {}x{}, generator needs {}x{}", latent.num_layers(), latent.dim(), g.num_layers(), g.latent_dim());
    }
    Ok(latent)
}

#[derive(Args, Debug)]
pub struct Render {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    generator: Option<PathBuf>,
    /// JSON file with `w` or `w_plus`; a latent is sampled from `--seed` otherwise.
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f64,
    #[arg(long)]
    out: PathBuf,
}

impl Render {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        let g = load_generator(&mut cfg)?;
        let latent = match &self.latent {
            Some(p) => read_latent(p, &g)?,
            None => broadcast_to_extended(&g.sample_latent(&mut stream(self.seed, tag::RANDOM_INIT, 0)), g.num_layers()),
        };
        let pose = CameraPose::new(self.yaw, self.roll, styleinv_core::field_core::DEFAULT_CAMERA_RADIUS)?;
        let img = synthesize_image(&latent, &pose, &g, &cfg.render)?;
        if let Some(dir) = self.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        save_png(&self.out, &img)?;
        snapshot_file(&cfg, &self.out)?;
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Selects the inversion mode the variant was trained for.
    #[arg(long, default_value = "full")]
    variant: String,
}

impl Evaluate {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        if self.encoder.is_some() {
            cfg.paths.encoder = self.encoder.clone();
        }
        let variant = Variant::parse(&self.variant)?;
        let g = load_generator(&mut cfg)?;
        let enc = load_encoder(&mut cfg)?;
        let dir = out_dir(&self.out, &cfg)?;
        let train_embedder = embedder(&mut cfg, &g, false, &dir)?;
        let eval_embedder = embedder(&mut cfg, &g, true, &dir)?;
        let losses = cfg.loss_modules(train_embedder);
        let metrics = cfg.metric_modules(eval_embedder);
        let test_set = cfg.build_test_set(&g)?;
        let setup = AblationSetup {
            train: &cfg.train,
            encoder: &cfg.encoder,
            generator: &g,
            real_pool: &[],
            losses: &losses,
            metrics: &metrics,
            render: &cfg.render,
            test_set: &test_set,
            invariance_identities: cfg.data.invariance_identities,
            invariance_views: cfg.data.invariance_views,
            eval_seed: cfg.seeds.test,
        };
        let m = evaluate_variant(variant, &enc, &setup)?;
        write_json(dir.join("metrics.json"), &m)?;
        fs::write(dir.join("metrics.csv"), ablation_csv(std::slice::from_ref(&m))?)?;
        snapshot_dir(&cfg, &dir)?;
        println!("{}", ablation_text_table(std::slice::from_ref(&m)));
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Ablate {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',', default_value = "full,no_syn,no_feat,no_triplet,no_real,w_only,wplus_only")]
    variants: Vec<String>,
    #[arg(long)]
    steps: Option<u64>,
}

impl Ablate {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        if let Some(s) = self.steps {
            cfg.train.total_steps = s;
        }
        let variants = self.variants.iter().map(|v| Variant::parse(v)).collect::<styleinv_core::Result<Vec<_>>>()?;
        let g = load_generator(&mut cfg)?;
        let dir = out_dir(&self.out, &cfg)?;
        let train_embedder = embedder(&mut cfg, &g, false, &dir)?;
        let eval_embedder = embedder(&mut cfg, &g, true, &dir)?;
        let losses = cfg.loss_modules(train_embedder);
        let metrics = cfg.metric_modules(eval_embedder);
        let pool = cfg.build_real_pool::<F>()?;
        let test_set = cfg.build_test_set(&g)?;
        snapshot_dir(&cfg, &dir)?;
        let setup = AblationSetup {
            train: &cfg.train,
            encoder: &cfg.encoder,
            generator: &g,
            real_pool: &pool,
            losses: &losses,
            metrics: &metrics,
            render: &cfg.render,
            test_set: &test_set,
            invariance_identities: cfg.data.invariance_identities,
            invariance_views: cfg.data.invariance_views,
            eval_seed: cfg.seeds.test,
        };
        let mut rows = Vec::new();
        for v in variants {
            let vdir = dir.join(v.name());
            create_dir(&vdir)?;
            info!("training variant {}", v.name());
            let opts = FitOptions {
                log_path: Some(vdir.join("train.jsonl")),
                checkpoint_dir: Some(vdir.join("checkpoints")),
                ..Default::default()
            };
            let (enc, m) = run_ablation(v, &setup, &opts)?;
            encoder_checkpoint(&enc, &cfg.render, m.config_hash.clone())?.save(vdir.join("encoder.ckpt"))?;
            write_json(vdir.join("metrics.json"), &m)?;
            rows.push(m);
        }
        fs::write(dir.join("ablation.csv"), ablation_csv(&rows)?)?;
        write_json(dir.join("ablation.json"), &rows)?;
        let table = ablation_text_table(&rows);
        fs::write(dir.join("ablation.txt"), &table)?;
        println!("{table}");
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Optimize {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Encoder giving the starting latent and pose; required by `--init encoder`.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, default_value = "encoder", value_parser = ["encoder", "mean", "random"])]
    init: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pose used when no encoder is given.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Pivotal tuning steps applied after latent optimisation.
    #[arg(long, default_value_t = 0)]
    tune_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    tune_lr: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Optimize {
    pub fn run(self) -> Result<()> {
        let mut cfg = resolve(&self.config)?;
        if self.generator.is_some() {
            cfg.paths.generator = self.generator.clone();
        }
        if self.encoder.is_some() {
            cfg.paths.encoder = self.encoder.clone();
        }
        let g = load_generator(&mut cfg)?;
        let dir = out_dir(&self.out, &cfg)?;
        let x = load_png::<F>(&self.image)?;
        let encoded = match cfg.paths.encoder {
            Some(_) => {
                let enc = load_encoder(&mut cfg)?;
                let icfg = InvertConfig { refine_iterations: cfg.train.refine_iterations, ..Default::default() };
                Some(invert_image(&x, &enc, &g, &cfg.render, &icfg, None)?)
            }
            None => None,
        };
        let pose = encoded.as_ref().map_or(CameraPose::from_yaw(self.yaw), |r| r.pose);
        let init = match (self.init.as_str(), &encoded) {
            ("encoder", Some(r)) => r.w_plus_refined.clone(),
            ("encoder", None) => bail!("--init encoder needs --encoder"),
            ("mean", _) => broadcast_to_extended(&g.mean_latent(), g.num_layers()),
            _ => broadcast_to_extended(&g.sample_latent(&mut stream(self.seed, tag::RANDOM_INIT, 0)), g.num_layers()),
        };
        let proxy = PerceptualProxy::<F>::new(cfg.seeds.perceptual_train);
        let (w, trace) = optimize_latent(&x, &init, &pose, &g, &cfg.render, &proxy, self.steps, self.lr)?;
        save_png(dir.join("optimized.png"), &synthesize_image(&w, &pose, &g, &cfg.render)?)?;
        let mut tune_trace = Vec::new();
        if self.tune_steps > 0 {
            let (tuned, t) = pivotal_tune(&x, &w, &pose, g.thawed_copy(), &cfg.render, &proxy, self.tune_steps, self.tune_lr)?;
            save_png(dir.join("tuned.png"), &synthesize_image(&w, &pose, &tuned, &cfg.render)?)?;
            generator_checkpoint(&tuned)?.save(dir.join("tuned_generator.ckpt"))?;
            tune_trace = t;
        }
        write_json(
            dir.join("trace.json"),
            &json!({
                "init": self.init,
                "pose": pose,
                "latent_losses": trace.losses,
                "best_step": trace.best_step,
                "tune_losses": tune_trace,
            }),
        )?;
        snapshot_dir(&cfg, &dir)?;
        info!("loss {:.5} -> {:.5}", trace.losses[0], trace.best_loss());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_is_inclusive() {
        let v = parse_sweep("-35:35:5").unwrap();
        assert_eq!(v.len(), 15);
        assert_eq!(v[0], -35.0);
        assert_eq!(v[14], 35.0);
        assert_eq!(parse_sweep("0:0:1").unwrap(), vec![0.0]);
        assert_eq!(parse_sweep("0:1:0.3").unwrap().len(), 4);
        for bad in ["1:0:1", "0:1:0", "0:1", "a:b:c"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }
}
