use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use d3_core::datamix::{format_manifest, parse_manifest, sample_paths, Dataset, ManifestEntry};
use d3_core::evalsuite::{evaluate, evaluate_maps, render_table, MetricsReport, Protocol, STUDENT_NFE};
use d3_core::networks::{build_student, build_teacher, load_checkpoint, load_teacher, save_checkpoint, save_teacher};
use d3_core::scenegen::{
    make_pseudo_labeled, random_scene, read_raster, render_scene, write_raster, write_sample, Provenance, Raster, RasterTag,
};
use d3_core::trainer::{pretrain_teacher, train_predictor, Stage, LOG_HEADER, PRETRAIN_HEADER};
use d3_core::{Error, Result, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::imageio::{read_rgb, rgb_tensor, write_png_map};

/// Per-sample listing written next to the source manifest.
pub const SAMPLE_LIST: &str = "manifest.tsv";
/// Source manifest consumed by the mixing loader.
pub const SOURCES: &str = "sources.tsv";
const SAMPLE_LIST_HEADER: &str = "file\tsource\tprovenance";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io(path))
}

/// Open a log file and write its header.
fn open_log(path: &Path, header: &str) -> Result<fs::File> {
    let mut f = fs::File::create(path).map_err(io(path))?;
    writeln!(f, "{header}").map_err(io(path))?;
    Ok(f)
}

/// A dataset argument may name the manifest or the directory holding it.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(SOURCES)
    } else {
        data.to_path_buf()
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let n: usize = cfg.num("data.n")?;
    if n == 0 {
        return Err(Error::Config("data.n must be positive".into()));
    }
    let size: usize = cfg.num("data.size")?;
    let ss: usize = cfg.num("data.supersample")?;
    let fraction: f64 = cfg.num("data.pseudo_fraction")?;
    let clean_rate: f64 = cfg.num("data.clean_rate")?;
    if !(0.0..=1.0).contains(&fraction) || !(0.0..=1.0).contains(&clean_rate) {
        return Err(Error::Config("data.pseudo_fraction and data.clean_rate must lie in [0, 1]".into()));
    }
    let scene_cfg = cfg.scene()?;
    let noise = cfg.pseudo_noise()?;
    let pseudo_n = (n as f64 * fraction).round() as usize;
    let clean_n = n - pseudo_n;
    if pseudo_n > 0 && clean_n > 0 && !(clean_rate > 0.0 && clean_rate < 1.0) {
        return Err(Error::Config("data.clean_rate must lie strictly inside (0, 1) for a mixed dataset".into()));
    }

    let mut sources = Vec::new();
    if clean_n > 0 {
        let rate = if pseudo_n > 0 { clean_rate } else { 1.0 };
        sources.push(("clean", rate, false));
    }
    if pseudo_n > 0 {
        let rate = if clean_n > 0 { 1.0 - clean_rate } else { 1.0 };
        sources.push(("pseudo", rate, true));
    }
    create_dir(out)?;
    for (name, _, _) in &sources {
        let dir = out.join(name);
        create_dir(&dir)?;
        // Stale samples from an earlier run would leak into the dataset.
        for p in sample_paths(&dir)? {
            fs::remove_file(&p).map_err(io(&p))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let mut listing = format!("{SAMPLE_LIST_HEADER}\n");
    for i in 0..n {
        let scene = random_scene(&mut rng, &scene_cfg)?;
        let mut sample = render_scene(&scene, (size, size), ss)?;
        let source = if i < clean_n { "clean" } else { "pseudo" };
        if i >= clean_n {
            sample = make_pseudo_labeled(sample, &mut rng, &noise)?;
        }
        let file = format!("{source}/sample_{i:05}.dpr");
        write_sample(&sample, &out.join(&file))?;
        let provenance = match sample.provenance {
            Provenance::Synthetic => "synthetic",
            Provenance::Pseudo => "pseudo",
        };
        listing.push_str(&format!("{file}\t{source}\t{provenance}\n"));
        if (i + 1) % 500 == 0 {
            log::info!("generated {} of {n} samples", i + 1);
        }
    }
    write_file(&out.join(SAMPLE_LIST), listing)?;
    let entries: Vec<ManifestEntry> = sources
        .iter()
        .map(|&(name, rate, pseudo)| ManifestEntry {
            name: name.to_string(),
            rate,
            kind: RunConfig::source_kind(pseudo),
            directory: PathBuf::from(name),
        })
        .collect();
    write_file(&out.join(SOURCES), format_manifest(&entries))?;
    cfg.write_to(out)?;
    log::info!("wrote {clean_n} clean and {pseudo_n} pseudo-labelled samples to {}", out.display());
    Ok(())
}

fn load_dataset(data: &Path) -> Result<(Dataset, (usize, usize))> {
    let data = Dataset::load(&manifest_path(data))?;
    let first = data
        .samples
        .first()
        .ok_or_else(|| Error::Input("dataset has no samples".into()))?;
    let size = (first.height, first.width);
    if let Some(s) = data.samples.iter().find(|s| (s.height, s.width) != size) {
        return Err(Error::Shape(format!(
            "dataset mixes {}x{} and {}x{} samples",
            size.0, size.1, s.height, s.width
        )));
    }
    Ok((data, size))
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let tcfg = cfg.train(Stage::Pretrain)?;
    let (data, size) = load_dataset(data)?;
    let net = cfg.network(size, 3)?;
    let mut teacher = build_teacher(&net, tcfg.seed)?;
    create_dir(out)?;
    cfg.write_to(out)?;
    let log_path = out.join("pretrain.log");
    let mut log_file = open_log(&log_path, PRETRAIN_HEADER)?;
    let every = (tcfg.steps / 20).max(1);
    pretrain_teacher(&mut teacher, &data, &tcfg, |r| {
        writeln!(log_file, "{}", r.to_line()).map_err(io(&log_path))?;
        if r.step % every == 0 {
            log::info!("pretrain step {} loss {:.5} lr {:.3e}", r.step, r.loss, r.lr);
        }
        Ok(())
    })?;
    let ckpt = out.join("teacher.d3ck");
    save_teacher(&teacher, tcfg.steps, &ckpt)?;
    log::info!("teacher checkpoint {} (checksum {:016x})", ckpt.display(), teacher.checksum());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, teacher_path: &Path, heldout: Option<&Path>, out: &Path) -> Result<()> {
    let tcfg = cfg.train(Stage::PredictTrain)?;
    let task = tcfg.task;
    let (teacher, _) = load_teacher(teacher_path)?;
    let (data, size) = load_dataset(data)?;
    let mut net = teacher.config().clone();
    if net.input_size != size {
        return Err(Error::Shape(format!(
            "teacher expects {}x{} images but the dataset holds {}x{}",
            net.input_size.0, net.input_size.1, size.0, size.1
        )));
    }
    net.output_channels = task.output_channels();
    let heldout = heldout.map(load_dataset).transpose()?.map(|(d, _)| d.samples);
    let protocol = Protocol {
        align: cfg.align()?,
        batch_size: cfg.num("eval.batch_size")?,
    };
    let mut state = build_student(&net, task, &teacher, cfg.projection()?, tcfg.seed)?;
    create_dir(out)?;
    cfg.write_to(out)?;
    let log_path = out.join("train.log");
    let mut log_file = open_log(&log_path, LOG_HEADER)?;
    let eval_path = out.join("eval.log");
    let mut eval_file = match &heldout {
        Some(_) if tcfg.eval_every > 0 => Some(open_log(&eval_path, "step\tmetrics")?),
        _ => None,
    };
    let every = (tcfg.steps / 20).max(1);
    let result = train_predictor(&mut state, &teacher, &data, &tcfg, |r, st| {
        writeln!(log_file, "{}", r.to_line()).map_err(io(&log_path))?;
        if r.step % every == 0 {
            log::info!(
                "train step {} total {:.5} agg {:.5} task {:.5}",
                r.step,
                r.breakdown.total,
                r.breakdown.agg,
                r.breakdown.task
            );
        }
        if let (Some(f), Some(samples)) = (eval_file.as_mut(), heldout.as_ref()) {
            if r.step % tcfg.eval_every == 0 {
                let report = evaluate(st, samples, task, &protocol)?;
                let kv: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(f, "{}\t{}", r.step, kv.join(",")).map_err(io(&eval_path))?;
            }
        }
        Ok(())
    });
    result?;
    let ckpt = out.join("student.d3ck");
    save_checkpoint(&state, &ckpt)?;
    log::info!("student checkpoint {} after {} steps", ckpt.display(), state.step);
    Ok(())
}

pub fn predict(checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    create_dir(out)?;
    for input in inputs {
        let (h, w, rgb) = read_rgb(input)?;
        let x = rgb_tensor(h, w, &rgb)?;
        let before = state.evaluations();
        let y = state.predict(&x)?;
        let nfe = state.evaluations() - before;
        let raster = d3_core::evalsuite::output_rasters(&y, state.task())
            .pop()
            .expect("one image in, one map out");
        let stem = input
            .file_stem()
            .ok_or_else(|| Error::Input(format!("{} has no file name", input.display())))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::new();
        write_raster(&mut bytes, &raster)?;
        write_file(&out.join(format!("{stem}.dpr")), bytes)?;
        write_png_map(&raster, &out.join(format!("{stem}.png")))?;
        log::info!("{} -> {stem}.dpr ({} NFE: {nfe} evaluation)", input.display(), state.task());
    }
    Ok(())
}

/// Sample files of a manifest in dataset order, relative to its folder.
fn sample_files(manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest).map_err(io(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut files = Vec::new();
    for entry in parse_manifest(&text)? {
        for p in sample_paths(&base.join(&entry.directory))? {
            files.push(p.strip_prefix(base).map(Path::to_path_buf).unwrap_or(p));
        }
    }
    Ok(files)
}

/// The raster of `tag` in a DPR1 file holding one or several rasters.
fn read_prediction(path: &Path, tag: RasterTag) -> Result<Raster> {
    let bytes = fs::read(path).map_err(io(path))?;
    let mut pos = 0;
    while pos < bytes.len() {
        let r = read_raster(&bytes, &mut pos)?;
        if r.tag == tag {
            return Ok(r);
        }
    }
    Err(Error::Input(format!("{} holds no {tag:?} raster", path.display())))
}

pub enum Predictions<'a> {
    Checkpoint(&'a Path),
    /// Directory laid out like the dataset, one DPR1 file per sample.
    Directory(&'a Path, Task),
}

pub fn eval(cfg: &RunConfig, data: &Path, preds: Predictions<'_>, out: &Path) -> Result<MetricsReport> {
    let protocol = Protocol {
        align: cfg.align()?,
        batch_size: cfg.num("eval.batch_size")?,
    };
    let manifest = manifest_path(data);
    let (dataset, _) = load_dataset(&manifest)?;
    let report = match preds {
        Predictions::Checkpoint(ckpt) => {
            let state = load_checkpoint(ckpt)?;
            evaluate(&state, &dataset.samples, state.task(), &protocol)?
        }
        Predictions::Directory(dir, task) => {
            let tag = match task {
                Task::Depth => RasterTag::Depth,
                Task::Normal => RasterTag::Normal,
                Task::Matting => RasterTag::Matte,
            };
            let maps = sample_files(&manifest)?
                .iter()
                .map(|f| read_prediction(&dir.join(f), tag))
                .collect::<Result<Vec<_>>>()?;
            evaluate_maps(&maps, &dataset.samples, task, &protocol, STUDENT_NFE)?
        }
    };
    create_dir(out)?;
    cfg.write_to(out)?;
    write_file(&out.join("metrics.txt"), report.to_kv())?;
    Ok(report)
}

/// `label=path` pairs, or bare paths labelled by their parent directory.
pub fn report(inputs: &[String], out: Option<&Path>) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one metrics file".into()));
    }
    let mut rows = Vec::new();
    for item in inputs {
        let (label, path) = match item.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(item);
                let label = p
                    .parent()
                    .and_then(Path::file_name)
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| item.clone());
                (label, p)
            }
        };
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        rows.push((label, MetricsReport::from_kv(&text)?));
    }
    let table = render_table(&rows)?;
    if let Some(out) = out {
        write_file(out, &table)?;
    }
    Ok(table)
}
