use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::codec::{read_grid, read_pnm, synth_panorama, write_grid, write_pnm, Codebook, FeatureExtractor, PanoImage, SemanticVector};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::metrics::{psnr, ssim, MetricsReport, Psnr};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Transformer};
use crate::pipeline::{left_columns, DecodeRun, Decoder, Regime, TrainData, Trainer};
use crate::rng::Streams;
use crate::sphere_grid::{GridSpec, TokenGrid};

/// Checkpoint record holding the feature-centering constant of the
/// training corpus, so guided generation embeds views the same way.
pub const FEATURE_CENTER: &str = "codec.feature_mean";

/// Written next to the corpus by `synth-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub vocab: usize,
    pub seed: u64,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct ExtrapolationReport {
    observed_cols: usize,
    #[serde(flatten)]
    run: DecodeRun,
    #[serde(skip_serializing_if = "Option::is_none")]
    ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<Psnr>,
}

fn par(cfg: &RunConfig) -> Parallelism {
    if cfg.parallel {
        Parallelism::available()
    } else {
        Parallelism::Sequential
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn json_line<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec(v)?;
    s.push(b'\n');
    Ok(s)
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn codebook(cfg: &RunConfig) -> Result<Codebook> {
    Codebook::build(cfg.codebook_seed, cfg.vocab, cfg.tile)
}

/// Sorted files in `dir` with extension `ext`.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn check_spec(grid: &TokenGrid, spec: &GridSpec, path: &Path) -> Result<()> {
    if grid.spec() != spec {
        let g = grid.spec();
        return Err(Error::Shape(format!(
            "{}: grid is {}x{} patches of side {}, config wants {}x{} of side {}",
            path.display(),
            g.rows,
            g.cols,
            g.patch_side,
            spec.rows,
            spec.cols,
            spec.patch_side
        )));
    }
    Ok(())
}

fn load_grids(dir: &Path, spec: &GridSpec) -> Result<Vec<TokenGrid>> {
    let files = files_with_ext(dir, "htg")?;
    if files.is_empty() {
        return Err(Error::Empty(format!("no token grids in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let g = read_grid(p, spec.vocab)?;
            check_spec(&g, spec, p)?;
            Ok(g)
        })
        .collect()
}

/// A token grid, or an image mapped onto the codebook.
fn load_panorama(path: &Path, spec: &GridSpec, cb: &Codebook) -> Result<TokenGrid> {
    let grid = if path.extension().is_some_and(|e| e == "htg") {
        read_grid(path, spec.vocab)?
    } else {
        cb.encode(&read_pnm(path)?, spec)?
    };
    check_spec(&grid, spec, path)?;
    Ok(grid)
}

/// Images of a set directory: token grids decoded through the codebook if
/// any are present, otherwise the PGM/PPM files themselves.
fn load_image_set(dir: &Path, cfg: &RunConfig, cb: &Codebook) -> Result<Vec<PanoImage>> {
    let grids = files_with_ext(dir, "htg")?;
    if !grids.is_empty() {
        let spec = cfg.grid()?;
        return grids
            .iter()
            .map(|p| {
                let g = read_grid(p, spec.vocab)?;
                check_spec(&g, &spec, p)?;
                cb.decode(&g, cfg.channels)
            })
            .collect();
    }
    let mut files = files_with_ext(dir, "pgm")?;
    files.extend(files_with_ext(dir, "ppm")?);
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no grids or images in {}", dir.display())));
    }
    files.iter().map(|p| read_pnm(p)).collect()
}

fn load_model(cfg: &RunConfig) -> Result<(Checkpoint, Transformer<f32>)> {
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    ckpt.check_config(&cfg.model_config())?;
    let model = Transformer::new(ckpt.config, ckpt.weights.clone())?;
    Ok((ckpt, model))
}

fn require_regime(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    match cfg.regime {
        Regime::Spm if !ckpt.flags.sc_trained => Err(Error::Config(
            "spm decoding needs a checkpoint trained with sc = true".into(),
        )),
        Regime::Arm if !ckpt.flags.arm_trained => Err(Error::Config(
            "arm decoding needs a checkpoint trained with arm_loss = true".into(),
        )),
        _ => Ok(()),
    }
}

fn write_panorama(dir: &Path, stem: &str, grid: &TokenGrid, cb: &Codebook, channels: usize) -> Result<()> {
    write_grid(&dir.join(format!("{stem}.htg")), grid)?;
    let img = cb.decode(grid, channels)?;
    write_pnm(&dir.join(format!("{stem}.{}", image_ext(channels))), &img)
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.grid()?;
    let streams = Streams::new(cfg.seed);
    let seeds = |split: u64, n: usize| -> Vec<u64> { (0..n as u64).map(|i| streams.seed("synth", &[split, i])).collect() };
    let manifest = Manifest {
        rows: spec.rows,
        cols: spec.cols,
        patch: spec.patch_side,
        vocab: spec.vocab,
        seed: cfg.seed,
        train: seeds(0, cfg.train_count),
        test: seeds(1, cfg.test_count),
    };
    for (name, list) in [("train", &manifest.train), ("test", &manifest.test)] {
        let dir = cfg.data_dir.join(name);
        create_dir(&dir)?;
        for p in files_with_ext(&dir, "htg")? {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (i, &s) in list.iter().enumerate() {
            write_grid(&dir.join(format!("{i:06}.htg")), &synth_panorama(s, &spec))?;
        }
    }
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write_file(&cfg.data_dir.join("manifest.json"), &text)?;
    eprintln!(
        "wrote {} train and {} test grids to {}",
        cfg.train_count,
        cfg.test_count,
        cfg.data_dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.grid()?;
    let par = par(cfg);
    let grids = load_grids(&cfg.data_dir.join("train"), &spec)?;
    let cb = codebook(cfg)?;
    let images: Vec<PanoImage> = grids.iter().map(|g| cb.decode(g, 1)).collect::<Result<_>>()?;
    let fx = FeatureExtractor::fit(cfg.sem_dim, images.iter())?;
    // Stored as f32; use the rounded value everywhere so guided runs match.
    let fx = FeatureExtractor::with_center(fx.k, fx.center as f32 as f64);
    let semantic: Option<Vec<Vec<SemanticVector>>> = if cfg.semantic {
        Some(
            images
                .iter()
                .map(|img| {
                    crate::codec::View::ALL
                        .iter()
                        .map(|&v| SemanticVector::of_image(img, v, &fx))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let tc = cfg.train_config();
    let mut trainer = if cfg.resume {
        let ckpt = load_checkpoint(&cfg.checkpoint)?;
        ckpt.check_config(&cfg.model_config())?;
        Trainer::resume(&ckpt, tc, par)?
    } else {
        Trainer::new(Transformer::init(cfg.model_config(), cfg.seed)?, tc, par)?
    };

    let trace = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(cfg.resume)
        .truncate(!cfg.resume)
        .open(&cfg.trace)
        .map_err(|e| Error::io(&cfg.trace, e))?;
    let mut trace = BufWriter::new(trace);
    let until = if cfg.stop_after > 0 { cfg.stop_after } else { cfg.steps };
    let data = TrainData {
        grids: &grids,
        semantic: semantic.as_deref(),
    };
    let start = trainer.step;
    let t0 = Instant::now();
    let result = trainer.run(data, until, |rec| {
        trace.write_all(&json_line(rec)?).map_err(|e| Error::io(&cfg.trace, e))?;
        if rec.step % 100 == 0 {
            eprintln!("step {} loss {:.4} ({:.1}s)", rec.step, rec.loss, t0.elapsed().as_secs_f64());
        }
        Ok(())
    });
    trace.flush().map_err(|e| Error::io(&cfg.trace, e))?;
    result?;

    let mut ckpt = trainer.checkpoint(trainer.flags());
    ckpt.extra.insert(FEATURE_CENTER.into(), vec![fx.center as f32]);
    save_checkpoint(&cfg.checkpoint, &ckpt)?;
    eprintln!(
        "trained steps {}..{} in {:.1}s, checkpoint {}",
        start,
        trainer.step,
        t0.elapsed().as_secs_f64(),
        cfg.checkpoint.display()
    );
    Ok(())
}

fn feature_extractor(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<FeatureExtractor> {
    let center = ckpt
        .extra
        .get(FEATURE_CENTER)
        .and_then(|v| v.first().copied())
        .ok_or_else(|| Error::CheckpointMismatch(format!("missing record {FEATURE_CENTER}")))?;
    Ok(FeatureExtractor::with_center(cfg.sem_dim, center as f64))
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.grid()?;
    let (ckpt, model) = load_model(cfg)?;
    require_regime(cfg, &ckpt)?;
    let cb = codebook(cfg)?;
    let mut decoder = Decoder::new(&model, spec)?;
    if let Some(src) = &cfg.semantic_from {
        if !ckpt.flags.semantic {
            return Err(Error::Config("checkpoint was trained without semantic conditioning".into()));
        }
        let fx = feature_extractor(cfg, &ckpt)?;
        let guide = load_panorama(src, &spec, &cb)?;
        decoder = decoder.with_semantic(SemanticVector::embed_all(&guide, &cb, &fx)?)?;
    }
    let dc = cfg.decode_config();
    let t0 = Instant::now();
    let out = decoder.generate_many(&dc, cfg.count, par(cfg))?;
    create_dir(&cfg.out_dir)?;
    let mut runs = Vec::new();
    for (i, (grid, run)) in out.iter().enumerate() {
        write_panorama(&cfg.out_dir, &format!("{i:06}"), grid, &cb, cfg.channels)?;
        runs.extend(json_line(run)?);
    }
    write_file(&cfg.out_dir.join("runs.jsonl"), &runs)?;
    eprintln!(
        "generated {} panoramas ({:?}) in {:.1}s",
        cfg.count,
        cfg.regime,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn extrapolate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.grid()?;
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("extrapolate needs an input grid or image".into()))?;
    let (ckpt, model) = load_model(cfg)?;
    require_regime(cfg, &ckpt)?;
    let cb = codebook(cfg)?;
    let partial = load_panorama(input, &spec, &cb)?;
    let observed_cols = if cfg.observed_cols == 0 { spec.cols / 2 } else { cfg.observed_cols };
    let observed = left_columns(&spec, observed_cols);
    let decoder = Decoder::new(&model, spec)?;
    let (grid, run) = decoder.extrapolate(&partial, &observed, &cfg.decode_config(), 0)?;
    create_dir(&cfg.out_dir)?;
    write_panorama(&cfg.out_dir, "extrapolated", &grid, &cb, cfg.channels)?;

    let (mut ssim_v, mut psnr_v) = (None, None);
    if let Some(truth) = &cfg.truth {
        let gt = cb.decode(&load_panorama(truth, &spec, &cb)?, cfg.channels)?;
        let out = cb.decode(&grid, cfg.channels)?;
        ssim_v = Some(ssim(&gt, &out)?);
        psnr_v = Some(psnr(&gt, &out)?);
    }
    let report = ExtrapolationReport {
        observed_cols,
        run,
        ssim: ssim_v,
        psnr: psnr_v,
    };
    let mut text = serde_json::to_vec_pretty(&report)?;
    text.push(b'\n');
    write_file(&cfg.out_dir.join("extrapolate.json"), &text)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let need = |d: &Option<PathBuf>, what: &str| {
        d.clone()
            .ok_or_else(|| Error::Config(format!("eval needs a {what} directory")))
    };
    let real_dir = need(&cfg.real_dir, "real")?;
    let fake_dir = need(&cfg.fake_dir, "fake")?;
    let cb = codebook(cfg)?;
    let real = load_image_set(&real_dir, cfg, &cb)?;
    let fake = load_image_set(&fake_dir, cfg, &cb)?;
    let report = MetricsReport::compute(&real, &fake, &FeatureExtractor::new(cfg.sem_dim), par(cfg))?;
    let mut text = serde_json::to_vec_pretty(&report)?;
    text.push(b'\n');
    match &cfg.report {
        Some(p) => write_file(p, &text),
        None => std::io::stdout()
            .write_all(&text)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}
