use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mddm::gradsuite::{run_suite, SuiteConfig, OPS};
use mddm::network::{branch_costs, count_flops, count_params, ModelConfig};
use mddm::synth::{
    make_dataset, procedural_sources, read_png, write_dataset, write_png, Dataset, Manifest, Split,
};
use mddm::train::{evaluate, infer, mean_scores, psnr, Checkpoint, PairScore, Trainer};
use mddm::{Error, Shape, Tensor};

use crate::config::CliConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "loss.csv";

fn require<'a>(path: Option<&'a Path>, what: &str) -> Result<&'a Path, CliError> {
    path.ok_or_else(|| CliError::Usage(format!("{what} requires --out <path>")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn center_crop(img: &Tensor, size: usize) -> Result<Tensor, CliError> {
    let s = img.shape();
    if s.h < size || s.w < size {
        return Err(CliError::Usage(format!(
            "source image {}x{} is smaller than synth.size {size}",
            s.h, s.w
        )));
    }
    let (y0, x0) = ((s.h - size) / 2, (s.w - size) / 2);
    let mut out = Tensor::zeros(Shape::new(1, 3, size, size)?);
    for c in 0..3 {
        let src = img.plane(0, c);
        let dst = out.plane_mut(0, c);
        for y in 0..size {
            dst[y * size..(y + 1) * size].copy_from_slice(&src[(y0 + y) * s.w + x0..(y0 + y) * s.w + x0 + size]);
        }
    }
    Ok(out)
}

fn png_sources(dir: &Path, size: usize) -> Result<Vec<Tensor>, CliError> {
    let io = |e| {
        CliError::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", dir.display())));
    }
    files.iter().map(|f| center_crop(&read_png(f)?, size)).collect()
}

pub fn synth(cfg: &CliConfig, out: Option<&Path>) -> Result<(), CliError> {
    let dir = require(out, "synth")?;
    let s = cfg.synth()?;
    let seed = cfg.seed()?;
    let sources = match &s.source_dir {
        Some(d) => png_sources(d, s.size)?,
        None => procedural_sources(s.sources, s.size, s.size, seed)?,
    };
    create_dir(dir)?;
    let data = make_dataset(&sources, &s.ranges, s.pairs, seed)?;
    write_dataset(dir, &data)?;
    let mut total = 0.0;
    for p in data.iter() {
        total += psnr(&p.moire, &p.clean)?;
    }
    println!(
        "wrote {} pairs ({} train, {} val) to {}; mean input PSNR {:.2} dB",
        data.len(),
        data.train.len(),
        data.val.len(),
        dir.display(),
        total / data.len() as f64
    );
    Ok(())
}

fn open_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("manifest {} does not exist", path.display())));
    }
    let m = Manifest::read(path)?;
    let missing = m.missing_files();
    if !missing.is_empty() {
        return Err(CliError::MissingFiles(missing));
    }
    Ok(m)
}

pub fn train(cfg: &CliConfig, data: Option<&Path>, resume: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let dir = require(out, "train")?;
    let manifest = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.path("train.data"))
        .ok_or_else(|| CliError::Usage("train requires --data <manifest> or train.data".into()))?;
    let resume = resume.map(Path::to_path_buf).or_else(|| cfg.path("train.resume"));
    let tcfg = cfg.train()?;
    let m = open_manifest(&manifest)?;
    let data = Dataset {
        train: m.load_pairs(Split::Train)?,
        val: m.load_pairs(Split::Val)?,
    };
    let mut trainer = match &resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, tcfg)?,
        None => Trainer::new(&cfg.model()?, tcfg)?,
    };
    create_dir(dir)?;
    let start = Instant::now();
    let result = trainer.run(&data, |r| {
        let val = r.val_psnr.map(|v| format!("{v:.3} dB")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>4}  lr {:.1e}  loss {:.6}  val_psnr {}  ({:.1}s)",
            r.epoch,
            r.lr,
            r.train_loss,
            val,
            start.elapsed().as_secs_f64()
        );
    });
    // the trainer rolls back on divergence, so this is the last good state
    trainer.state.save(&dir.join(CHECKPOINT_FILE))?;
    write_text(&dir.join(LOG_FILE), &trainer.log.to_csv())?;
    result?;
    println!(
        "trained {} epochs; checkpoint {} and log {}",
        trainer.log.rows.len(),
        dir.join(CHECKPOINT_FILE).display(),
        dir.join(LOG_FILE).display()
    );
    Ok(())
}

pub fn infer_png(checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dest = require(out, "infer")?;
    let ck = Checkpoint::load(checkpoint)?;
    let img = read_png(input)?;
    let restored = infer(&ck.model, &img)?;
    write_png(dest, &restored)?;
    let s = img.shape();
    println!("wrote {} ({}x{})", dest.display(), s.w, s.h);
    Ok(())
}

pub fn eval(cfg: &CliConfig, checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let split = cfg.raw("eval.split").unwrap_or("all");
    let splits: &[Split] = match split {
        "all" => &[Split::Train, Split::Val],
        "train" => &[Split::Train],
        "val" => &[Split::Val],
        other => return Err(CliError::Usage(format!("eval.split = '{other}': expected all, train or val"))),
    };
    let m = open_manifest(manifest)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    for &sp in splits {
        names.extend(m.entries.iter().filter(|e| e.split == sp).map(|e| e.moire.display().to_string()));
        pairs.extend(m.load_pairs(sp)?);
    }
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("manifest has no pairs in split '{split}'")));
    }
    let scores = evaluate(&ck.model, &pairs)?;
    let mean = mean_scores(&scores);
    let row = |name: &str, s: &PairScore| {
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6}",
            s.input_psnr, s.input_ssim, s.output_psnr, s.output_ssim
        )
    };
    let mut csv = String::from("pair,input_psnr,input_ssim,output_psnr,output_ssim\n");
    println!("{:<28} {:>10} {:>10} {:>11} {:>11}", "pair", "in_psnr", "in_ssim", "out_psnr", "out_ssim");
    for (name, s) in names.iter().zip(&scores).chain(std::iter::once((&"mean".to_string(), &mean))) {
        println!(
            "{:<28} {:>10.3} {:>10.4} {:>11.3} {:>11.4}",
            name, s.input_psnr, s.input_ssim, s.output_psnr, s.output_ssim
        );
        csv.push_str(&row(name, s));
        csv.push('\n');
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_text(path, &csv)?;
    }
    Ok(())
}

pub fn gradcheck(cfg: &CliConfig) -> Result<(), CliError> {
    let mut suite = SuiteConfig {
        seed: cfg.seed()?,
        configs: cfg.get_or("gradcheck.configs", 3)?,
        fault: cfg.raw("gradcheck.fault").map(str::to_string),
        ..SuiteConfig::default()
    };
    suite.check.tol = cfg.get_or("gradcheck.tol", suite.check.tol)?;
    let start = Instant::now();
    let reports = run_suite(&suite, |r| println!("{r}"))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    println!(
        "{} checks over {} operations, {} failed, {:.1}s",
        reports.len(),
        OPS.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn mega(x: u64) -> f64 {
    x as f64 / 1e6
}

fn giga(x: u64) -> f64 {
    x as f64 / 1e9
}

pub fn params(cfg: &CliConfig) -> Result<(), CliError> {
    let model = cfg.model()?;
    let size: usize = cfg.get_or("params.size", 256)?;
    println!(
        "{} channels, blocks {:?}, input {size}x{size}",
        model.channels,
        &model.cdr_counts[1..]
    );
    println!(
        "{:>2} {:>12} {:>10} {:>14} {:>12} {:>8}",
        "B", "params(M)", "GFLOPs", "no-DFE(M)", "no-DFE GF", "DFE %"
    );
    for b in 1..=model.branches {
        let with = model.truncated(b);
        let without = ModelConfig {
            dfe_enabled: false,
            ..with.clone()
        };
        let (p, p0) = (count_params(&with), count_params(&without));
        println!(
            "{:>2} {:>12.4} {:>10.3} {:>14.4} {:>12.3} {:>7.1}%",
            b,
            mega(p),
            giga(count_flops(&with, size, size)),
            mega(p0),
            giga(count_flops(&without, size, size)),
            100.0 * (p - p0) as f64 / p0 as f64
        );
    }
    println!("{:>6} {:>12} {:>10} {:>12} {:>10}", "branch", "params(M)", "GFLOPs", "DFE(M)", "DFE GF");
    for (i, c) in branch_costs(&model, size, size).iter().enumerate() {
        println!(
            "{:>6} {:>12.4} {:>10.3} {:>12.4} {:>10.3}",
            i,
            mega(c.params),
            giga(c.flops),
            mega(c.dfe_params),
            giga(c.dfe_flops)
        );
    }
    Ok(())
}
