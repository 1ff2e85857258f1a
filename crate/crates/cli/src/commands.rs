use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser};
use refsketch::curation::{self, CullConfig};
use refsketch::evaluation::{self, EvalBackbones, MetricReport, EVAL_RESOLUTION};
use refsketch::extractors::{Lpips, Vgg16, VggInput};
use refsketch::imaging::{self, Raster};
use refsketch::losses::{CellPoolExtractor, FeatureExtractor};
use refsketch::style_pretrain::{self, StyleCorpus};
use refsketch::training::{self, Checkpoint, LossNetworks, TrainData, Trainer};
use refsketch::{synth, Error};

use crate::config::RunConfig;
use crate::{Cli, Command, CurateCommand, CurateShared, SynthKind, TrainArgs};

pub enum Failure {
    Usage(clap::Error),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> refsketch::Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.device, g.device.clone());
    set(&mut cfg.out_dir, g.out_dir.clone());
    set(&mut cfg.log_level, g.log_level.clone());
    match &cli.command {
        Command::PretrainStyle(a) => {
            let p = &mut cfg.pretrain;
            set(&mut p.epochs, a.epochs);
            set(&mut p.batch, a.batch);
            set(&mut p.lr, a.lr);
            set(&mut p.margin, a.margin);
            set(&mut p.base_channels, a.base_channels);
            set(&mut p.resolution, a.resolution);
            set(&mut p.max_attempts, a.max_attempts);
        }
        Command::Curate(c) => {
            let (shared, k) = match c {
                CurateCommand::Cull(a) => {
                    set(&mut cfg.curate.k_cull, a.k);
                    set(&mut cfg.curate.rounds, a.rounds);
                    (&a.shared, None)
                }
                CurateCommand::Styles(a) => (&a.shared, a.k),
            };
            set(&mut cfg.curate.k_styles, k);
            set(&mut cfg.curate.resolution, shared.resolution);
            set(&mut cfg.curate.thumb, shared.thumb);
            if shared.vgg_weights.is_some() {
                cfg.curate.vgg_weights = shared.vgg_weights.clone();
            }
        }
        Command::Train(a) => apply_train_flags(&mut cfg, a),
        Command::Evaluate(a) => apply_eval_flags(&mut cfg, a),
        Command::CyclicEval(a) => {
            apply_eval_flags(&mut cfg, &a.eval);
            set(&mut cfg.evaluate.against, a.against.map(Into::into));
        }
        Command::ExportEmbeddings(a) => set(&mut cfg.pretrain.resolution, a.resolution),
        Command::Extract(_) | Command::ConfigDump { .. } | Command::SynthCorpus(_) => {}
    }
    cfg.sync_seeds();
    if cfg.device != "cpu" {
        return Err(Error::Config(format!("unsupported device `{}`; only cpu is available", cfg.device)));
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch, a.batch);
    set(&mut t.lr, a.lr);
    set(&mut t.beta1, a.beta1);
    set(&mut t.beta2, a.beta2);
    if a.clip_norm.is_some() {
        t.clip_norm = a.clip_norm;
    }
    set(&mut t.resolution, a.resolution);
    set(&mut t.generator.base_channels, a.base_channels);
    set(&mut t.generator.reduction, a.reduction);
    set(&mut t.discriminator_channels, a.discriminator_channels);
    t.no_attention |= a.no_attention;
    t.no_style |= a.no_style;
    t.no_line |= a.no_line;
    t.no_cyc |= a.no_cyc;
    t.saturating |= a.saturating;
    for (slot, v) in [
        (&mut t.hed_weights, &a.hed_weights),
        (&mut t.vgg_weights, &a.vgg_weights),
        (&mut t.style_encoder, &a.style_encoder),
    ] {
        if v.is_some() {
            *slot = v.clone();
        }
    }
    set(&mut t.line_taps, a.line_taps.clone());
}

fn apply_eval_flags(cfg: &mut RunConfig, a: &crate::EvaluateArgs) {
    if a.vgg_weights.is_some() {
        cfg.evaluate.vgg_weights = a.vgg_weights.clone();
    }
    if a.lpips_weights.is_some() {
        cfg.evaluate.lpips_weights = a.lpips_weights.clone();
    }
    set(&mut cfg.evaluate.resolution, a.resolution);
}

pub fn run(cli: Cli) -> Outcome {
    if let Command::ConfigDump { invocation } = &cli.command {
        let target = if invocation.is_empty() {
            cli
        } else {
            let mut argv = vec!["refsketch".to_string()];
            argv.extend(global_args(&cli));
            argv.extend(invocation.iter().cloned());
            Cli::try_parse_from(argv).map_err(Failure::Usage)?
        };
        let cfg = resolve(&target)?;
        std::io::stdout().write_all(cfg.dump()?.as_bytes())?;
        return Ok(());
    }
    let cfg = resolve(&cli)?;
    init_logging(&cfg.log_level);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("run_config.toml"), cfg.dump()?)?;
    match &cli.command {
        Command::PretrainStyle(a) => pretrain(&cfg, &a.corpus, &cfg.output(&a.out)),
        Command::Curate(CurateCommand::Cull(a)) => cull(&cfg, &a.shared, &a.keep),
        Command::Curate(CurateCommand::Styles(a)) => styles(&cfg, &a.shared),
        Command::Train(a) => train(&cfg, a),
        Command::Extract(a) => {
            let out = cfg.output(&a.out);
            training::extract(&a.ckpt, &a.content, &a.reference, &out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate(a) => {
            let model = Checkpoint::load(&a.ckpt)?.models()?.gs;
            let pairs = curation::load_4skst(&a.dataset)?;
            let report = evaluation::evaluate_extraction_at(&model, &pairs, &backbones(&cfg)?, cfg.evaluate.resolution)?;
            write_reports(&cfg.output(&a.out), &report, &[("extraction", &report)])
        }
        Command::CyclicEval(a) => {
            let model = Checkpoint::load(&a.eval.ckpt)?.models()?.gs;
            let pairs = curation::load_4skst(&a.eval.dataset)?;
            let e = &cfg.evaluate;
            let report = evaluation::cyclic_evaluate_at(&model, &pairs, &backbones(&cfg)?, e.against, e.resolution)?;
            let blocks = [("first_pass", &report.first_pass), ("cyclic", &report.cyclic)];
            write_reports(&cfg.output(&a.eval.out), &report, &blocks)
        }
        Command::ExportEmbeddings(a) => export(&cfg, a),
        Command::SynthCorpus(a) => {
            match a.kind {
                SynthKind::Style => {
                    synth::write_style_corpus(&cfg.out_dir, 0..a.count as u64, a.size)?;
                }
                SynthKind::Eval => synth::write_eval_set(&cfg.out_dir, a.size)?,
                SynthKind::Unpaired => {
                    synth::write_unpaired(&cfg.out_dir.join("color"), &cfg.out_dir.join("sketch"), a.count, a.size)?
                }
            }
            log::info!("wrote {:?} corpus to {}", a.kind, cfg.out_dir.display());
            Ok(())
        }
        Command::ConfigDump { .. } => unreachable!("handled above"),
    }
}

/// Global flags of `cli` in argv form, so a nested invocation inherits them.
fn global_args(cli: &Cli) -> Vec<String> {
    let g = &cli.global;
    let mut v = Vec::new();
    let mut push = |flag: &str, value: Option<String>| {
        if let Some(value) = value {
            v.push(flag.to_string());
            v.push(value);
        }
    };
    push("--seed", g.seed.map(|s| s.to_string()));
    push("--device", g.device.clone());
    push("--config", g.config.as_ref().map(|p| p.display().to_string()));
    push("--out-dir", g.out_dir.as_ref().map(|p| p.display().to_string()));
    push("--log-level", g.log_level.clone());
    v
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

fn pretrain(cfg: &RunConfig, corpus: &Path, out: &Path) -> Outcome {
    let corpus = StyleCorpus::load_manifest(corpus)?;
    let images = corpus.load_images(cfg.pretrain.resolution)?;
    log::info!("pretraining on {} sketches", corpus.len());
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let trained = style_pretrain::pretrain_style_encoder(&corpus, &images, &cfg.pretrain, Some(out), |e, loss| {
        log::info!("epoch {}/{} triplet loss {loss:.6}", e + 1, cfg.pretrain.epochs)
    })?;
    style_pretrain::save_style_encoder(&trained.encoder, out)?;
    let mut log = csv::Writer::from_path(cfg.out_dir.join("pretrain_log.csv")).map_err(Error::from)?;
    log.write_record(["epoch", "triplet_loss"]).map_err(Error::from)?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        log.write_record([(e + 1).to_string(), l.to_string()]).map_err(Error::from)?;
    }
    log.flush()?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn cluster_backbone(cfg: &RunConfig) -> refsketch::Result<Box<dyn FeatureExtractor>> {
    Ok(match &cfg.curate.vgg_weights {
        Some(p) => Box::new(Vgg16::load(p, &["pool5"], VggInput::ImageNet)?.with_input_size(224, 224)),
        None => {
            log::warn!("no VGG weights given; clustering pooled pixels instead of pool5 features");
            Box::new(CellPoolExtractor { cell: (cfg.curate.resolution / 8).max(1) })
        }
    })
}

fn load_for_clustering(cfg: &RunConfig, dir: &Path) -> refsketch::Result<(Vec<PathBuf>, Vec<candle_core::Tensor>)> {
    let paths = curation::list_images(dir)?;
    let r = cfg.curate.resolution;
    let images = paths
        .iter()
        .map(|p| Ok(imaging::resize(&imaging::load_color(p)?, r, r)?.tensor().clone()))
        .collect::<refsketch::Result<Vec<_>>>()?;
    Ok((paths, images))
}

fn write_labels(path: &Path, paths: &[PathBuf], labels: &[usize]) -> refsketch::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "label"])?;
    for (p, l) in paths.iter().zip(labels) {
        w.write_record([p.display().to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_keep(keep: &[String]) -> std::result::Result<Vec<Vec<usize>>, Failure> {
    keep.iter()
        .map(|round| {
            round
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>().map_err(|_| {
                        Failure::Usage(Cli::command().error(
                            clap::error::ErrorKind::ValueValidation,
                            format!("--keep expects comma-separated cluster labels, got `{round}`"),
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

fn cull(cfg: &RunConfig, shared: &CurateShared, keep: &[String]) -> Outcome {
    let keep = parse_keep(keep)?;
    let (paths, images) = load_for_clustering(cfg, &shared.images)?;
    let features = curation::extract_cluster_features(&images, cluster_backbone(cfg)?.as_ref())?;
    let config = CullConfig { k: cfg.curate.k_cull, rounds: cfg.curate.rounds, seed: cfg.seed };
    let sheets = cfg.out_dir.join("sheets");
    let outcome = curation::cull_improper(&images, &features, &config, &keep, Some(&sheets))?;
    let mut survivors: Vec<usize> = (0..paths.len()).collect();
    for (r, round) in outcome.rounds.iter().enumerate() {
        let members: Vec<PathBuf> = survivors.iter().map(|&i| paths[i].clone()).collect();
        write_labels(&cfg.out_dir.join(format!("clusters_round{}.csv", r + 1)), &members, &round.labels)?;
        survivors = survivors.iter().zip(&round.labels).filter(|(_, l)| keep[r].contains(l)).map(|(&i, _)| i).collect();
    }
    match &outcome.pending {
        Some(pending) => {
            let r = outcome.rounds.len() + 1;
            let members: Vec<PathBuf> = outcome.kept.iter().map(|&i| paths[i].clone()).collect();
            write_labels(&cfg.out_dir.join(format!("clusters_round{r}.csv")), &members, &pending.labels)?;
            log::info!(
                "round {r} awaits review: inspect {}/round{r}_cluster*.png and rerun with one more --keep",
                sheets.display()
            );
        }
        None => {
            let mut w = csv::Writer::from_path(cfg.out_dir.join("kept.csv")).map_err(Error::from)?;
            w.write_record(["path"]).map_err(Error::from)?;
            for &i in &outcome.kept {
                w.write_record([paths[i].display().to_string()]).map_err(Error::from)?;
            }
            w.flush()?;
            log::info!("kept {} of {} images", outcome.kept.len(), paths.len());
        }
    }
    Ok(())
}

fn styles(cfg: &RunConfig, shared: &CurateShared) -> Outcome {
    let (paths, images) = load_for_clustering(cfg, &shared.images)?;
    let features = curation::extract_cluster_features(&images, cluster_backbone(cfg)?.as_ref())?;
    let a = curation::identify_styles(&features, cfg.curate.k_styles, cfg.seed)?;
    curation::write_contact_sheets(&images, &a.labels, a.k(), &cfg.out_dir.join("sheets"), "styles", cfg.curate.thumb)?;
    write_labels(&cfg.out_dir.join("styles.csv"), &paths, &a.labels)?;
    log::info!("{} sketches in {} style clusters (inertia {:.4})", paths.len(), a.k(), a.inertia);
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Outcome {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let saved = Checkpoint::load(ckpt)?.config;
            if saved != cfg.train {
                log::warn!("resuming with the checkpoint's settings; [train] overrides are ignored");
            }
            Trainer::resume(ckpt, LossNetworks::from_config(&saved)?)?
        }
        None => Trainer::new(cfg.train.clone(), LossNetworks::from_config(&cfg.train)?)?,
    };
    let r = trainer.config().resolution;
    let data = TrainData::load(&a.color_dir, &a.sketch_dir, r)?;
    log::info!("{} color images, {} sketches at {r}x{r}", data.colors.len(), data.sketches.len());
    let last = training::train(&mut trainer, &data, &cfg.out_dir)?;
    log::info!("final checkpoint {}", last.display());
    Ok(())
}

fn backbones(cfg: &RunConfig) -> refsketch::Result<EvalBackbones> {
    let e = &cfg.evaluate;
    if e.resolution != EVAL_RESOLUTION {
        log::warn!("scoring at {0}x{0}; numbers are not comparable with {EVAL_RESOLUTION}x{EVAL_RESOLUTION} reports", e.resolution);
    }
    let lpips = match (&e.vgg_weights, &e.lpips_weights) {
        (Some(v), Some(l)) => Lpips::load_vgg(v, l)?,
        _ => {
            log::warn!("LPIPS needs both VGG and LPIPS weights; using the uncalibrated pixel stand-in");
            Lpips::stub()
        }
    };
    let fid: Box<dyn FeatureExtractor> = match &e.vgg_weights {
        Some(v) => Box::new(Vgg16::load(v, &["gap5"], VggInput::ImageNet)?),
        None => {
            log::warn!("no FID backbone weights; using 8x8 grids of pooled pixels");
            Box::new(CellPoolExtractor { cell: (e.resolution / 8).max(1) })
        }
    };
    Ok(EvalBackbones { lpips, fid })
}

fn write_reports<T: serde::Serialize>(json: &Path, report: &T, blocks: &[(&str, &MetricReport)]) -> Outcome {
    if let Some(parent) = json.parent() {
        std::fs::create_dir_all(parent)?;
    }
    evaluation::write_json(report, json)?;
    let csv = json.with_extension("csv");
    evaluation::write_csv(blocks, &csv)?;
    for (name, r) in blocks {
        log::info!(
            "{name}: PSNR {:.3} LPIPS {:.4} FID {:.3} over {} pairs",
            r.aggregate.psnr,
            r.aggregate.lpips,
            r.aggregate.fid,
            r.n_pairs
        );
    }
    log::info!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn export(cfg: &RunConfig, a: &crate::ExportArgs) -> Outcome {
    let encoder = style_pretrain::load_style_encoder(&a.encoder)?;
    let mut sketches = Vec::new();
    if let Some(manifest) = &a.source.manifest {
        let corpus = StyleCorpus::load_manifest(manifest)?;
        for e in corpus.entries() {
            sketches.push((e.path.display().to_string(), e.style_id.to_string(), imaging::load_sketch(&e.path)?));
        }
    } else if let Some(dir) = &a.source.images {
        for p in curation::list_images(dir)? {
            sketches.push((p.display().to_string(), String::new(), imaging::load_sketch(&p)?));
        }
    }
    let rows = style_pretrain::embed_all(&encoder, &sketches, Some(cfg.pretrain.resolution))?;
    let out = cfg.output(&a.out);
    style_pretrain::export_embeddings(&rows, &out)?;
    log::info!("wrote {} embeddings to {}", rows.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("refsketch").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        std::fs::write(&file, "seed = 3\n[train]\nepochs = 7\nbatch = 2\n").unwrap();
        let f = file.to_str().unwrap();
        let cli = parse(&["--config", f, "train", "--color-dir", "c", "--sketch-dir", "s", "--epochs", "1"]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.batch, 2);
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.pretrain.seed), (3, 3, 3));
        let cli = parse(&["--config", f, "--seed", "9", "config-dump"]);
        assert_eq!(resolve(&cli).unwrap().train.seed, 9);
    }

    #[test]
    fn keep_lists_parse() {
        let keep = parse_keep(&["0, 2,5".into(), "".into()]).ok().unwrap();
        assert_eq!(keep, vec![vec![0, 2, 5], vec![]]);
        assert!(parse_keep(&["a".into()]).is_err());
    }
}
