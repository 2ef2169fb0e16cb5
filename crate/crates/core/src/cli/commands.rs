use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use super::bench::{bench_csv, run_bench};
use super::*;
use crate::cloud_screen::{frame_quality, CloudParams, FrameQuality};
use crate::composite::{composite_mean, composite_median, fuse_rgb, to_uint8, FusedRgb, Stretch};
use crate::cube::{BandMap, SitsCube, DEFAULT_REFLECTANCE_SCALE};
use crate::fewshot::{
    apply_norm, fit_norm, sample_split, sample_split_stratified, spatial_crop, temporal_dropout, AugmentSpec,
};
use crate::gradcheck::{grad_check_csv, grad_check_suite};
use crate::metrics::{metrics_csv, metrics_text, ConfusionMatrix};
use crate::par::Exec;
use crate::region_loss::{pixel_ce_loss_grad, total_loss, LogitsCube, LossConfig, RegionSmoothLoss, VarianceMode};
use crate::region_prior::{build_region_map, fallback_regions, random_superpixels, MaskStack, RegionMap};
use crate::rng::SeededRng;
use crate::synth::{synth_sits, SynthConfig, SynthScene};
use crate::tensor_io::{DType, TensorContainer};
use crate::trainer::{featurize, train, TrainConfig, TrainData, TrainOutcome};

pub(super) fn dispatch(cmd: &Command, run: &mut Run) -> Result<()> {
    match cmd {
        Command::PriorGen(a) => prior_gen(a, run),
        Command::Composite(a) => composite(a, run),
        Command::Loss(a) => loss(a, run),
        Command::GradCheck(a) => grad_check(a, run),
        Command::Metrics(a) => metrics(a, run),
        Command::Split(a) => split(a, run),
        Command::Augment(a) => augment(a, run),
        Command::Synth(a) => synth(a, run),
        Command::DemoTrain(a) => demo_train(a, run),
        Command::Bench(a) => bench(a, run),
        Command::Replay(_) => unreachable!("replay is handled before dispatch"),
    }
}

fn parse_flag<T: std::str::FromStr>(v: Option<&str>, flag: &str) -> Result<Option<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    v.map(str::parse::<T>).transpose().with_context(|| format!("--{flag}"))
}

fn load_cube(a: &CubeArgs, run: &mut Run) -> Result<SitsCube> {
    let band_map = parse_flag::<BandMap>(a.band_map.as_deref(), "band-map")?;
    let band_map = run.cfg.get("band-map", band_map, BandMap::default())?;
    let scale = run.cfg.get("scale", a.scale, DEFAULT_REFLECTANCE_SCALE)?;
    let t = run.load(&a.input, "input")?;
    let shape: [usize; 4] = t.shape().try_into().map_err(|_| {
        Error::Validation(format!(
            "--input {}: cube must be [T,C,H,W], got shape {:?}",
            a.input.display(),
            t.shape()
        ))
    })?;
    if !matches!(t.dtype(), DType::F32 | DType::U16) {
        bail!(Error::Validation(format!(
            "--input {}: cube must be f32 or u16, got {:?}",
            a.input.display(),
            t.dtype()
        )));
    }
    SitsCube::from_raw(shape, &t.to_f32_vec(), band_map, scale)
        .with_context(|| format!("--input {}", a.input.display()))
}

fn cloud_params(a: &CubeArgs, run: &mut Run) -> Result<CloudParams> {
    let d = CloudParams::default();
    Ok(CloudParams {
        clear_threshold: run.cfg.get("cloud-threshold", a.cloud_threshold, d.clear_threshold)?,
        ..d
    })
}

fn stretch(a: &CubeArgs, run: &mut Run) -> Result<Stretch> {
    let s = parse_flag::<Stretch>(a.stretch.as_deref(), "stretch")?;
    Ok(run.cfg.get("stretch", s, Stretch::default())?)
}

fn quality_csv(fq: &FrameQuality) -> String {
    let mut s = String::from("frame,cloud_ratio,brightness,sharpness,score,clear\n");
    for t in 0..fq.frames() {
        writeln!(
            s,
            "{t},{},{},{},{},{}",
            fq.cloud_ratio[t],
            fq.brightness[t],
            fq.sharpness[t],
            fq.score[t],
            fq.clear_set.contains(&t) as u8
        )
        .unwrap();
    }
    s
}

fn fused_tensors(rgb: &FusedRgb) -> Result<(TensorContainer, TensorContainer)> {
    let shape = vec![3, rgb.height, rgb.width];
    Ok((
        TensorContainer::f32(shape.clone(), rgb.values.clone())?,
        TensorContainer::u8(shape, to_uint8(&rgb.values))?,
    ))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn prior_gen(a: &PriorGenArgs, run: &mut Run) -> Result<()> {
    let cube = load_cube(&a.cube, run)?;
    let params = cloud_params(&a.cube, run)?;
    let mode = stretch(&a.cube, run)?;
    let id = run.cfg.get("id", a.id.clone(), "0".to_string())?;
    let fq = frame_quality(&cube, &params)?;
    let rgb = fuse_rgb(&cube, &fq, mode)?;
    let (h, w) = (cube.height(), cube.width());

    let masks = run
        .cfg
        .get_opt::<String>("masks", a.masks.as_ref().map(|p| p.display().to_string()))?;
    let mut source = run.cfg.get("source", a.source.clone(), "fallback".to_string())?;
    let mut map = None;
    if let Some(path) = masks {
        let t = run.load(Path::new(&path), "masks")?;
        let stack = MaskStack::from_tensor(&t).with_context(|| format!("--masks {path}"))?;
        if (stack.height, stack.width) != (h, w) {
            bail!(Error::Validation(format!(
                "--masks {path}: masks are {}x{}, cube frames are {h}x{w}",
                stack.height, stack.width
            )));
        }
        let m = build_region_map(&stack)?;
        if m.region_count() == 0 {
            eprintln!("warning: --masks {path} covers no pixels; using the {source} region source");
        } else {
            source = "masks".to_string();
            map = Some(m);
        }
    }
    let map = match map {
        Some(m) => m,
        None => match source.as_str() {
            "fallback" => {
                let grid = run.cfg.get("grid", a.grid, 8usize)?;
                fallback_regions(&rgb, grid)?
            }
            "superpixels" => {
                let sites = run.cfg.get("sites", a.sites, 64usize)?;
                random_superpixels(h, w, sites, run.seed()?)?
            }
            other => bail!(Error::Config(format!(
                "--source must be fallback or superpixels, got {other:?}"
            ))),
        },
    };

    let (f32_rgb, u8_rgb) = fused_tensors(&rgb)?;
    run.tensor(&format!("SAM_PRIOR_{id}.stsr"), &map.to_tensor())?;
    run.tensor(&format!("FUSED_RGB_{id}.stsr"), &f32_rgb)?;
    run.tensor(&format!("FUSED_RGB_{id}_u8.stsr"), &u8_rgb)?;
    run.text("quality.csv", &quality_csv(&fq))?;
    run.say("best_frame", fq.best_frame);
    run.say("clear_frames", fq.clear_set.len());
    run.say("regions", map.region_count());
    run.say("source", source);
    Ok(())
}

fn composite(a: &CompositeArgs, run: &mut Run) -> Result<()> {
    let cube = load_cube(&a.cube, run)?;
    let params = cloud_params(&a.cube, run)?;
    let method = run.cfg.get("method", a.method.clone(), "fused".to_string())?;
    let fq = frame_quality(&cube, &params)?;
    match method.as_str() {
        "fused" => {
            let mode = stretch(&a.cube, run)?;
            let rgb = fuse_rgb(&cube, &fq, mode)?;
            let (f, u) = fused_tensors(&rgb)?;
            run.tensor("COMPOSITE.stsr", &f)?;
            run.tensor("COMPOSITE_u8.stsr", &u)?;
            run.say("frames", join(&rgb.source_frames));
        }
        "mean" | "median" => {
            let which = run.cfg.get("frames", a.frames.clone(), "clear".to_string())?;
            let frames: Vec<usize> = match which.as_str() {
                "clear" => fq.clear_set.clone(),
                "all" => (0..cube.frames()).collect(),
                other => bail!(Error::Config(format!("--frames must be clear or all, got {other:?}"))),
            };
            let c = if method == "mean" {
                composite_mean(&cube, &frames)?
            } else {
                composite_median(&cube, &frames)?
            };
            run.tensor(
                "COMPOSITE.stsr",
                &TensorContainer::f32(vec![c.channels, c.height, c.width], c.values)?,
            )?;
            run.say("frames", join(&frames));
        }
        other => bail!(Error::Config(format!(
            "--method must be fused, mean or median, got {other:?}"
        ))),
    }
    run.say("method", method);
    Ok(())
}

/// Accepts `[B,H,W]`, or `[H,W]` repeated for every item.
fn labels_for(t: &TensorContainer, pred: &LogitsCube, flag: &str, path: &Path) -> Result<Vec<i32>> {
    let [b, _, h, w] = pred.shape();
    if t.shape() == [h, w] {
        return Ok(t.to_i32_vec()?.repeat(b));
    }
    if t.shape() != [b, h, w] {
        bail!(Error::Validation(format!(
            "--{flag} {}: shape {:?} does not match logits {:?}",
            path.display(),
            t.shape(),
            pred.shape()
        )));
    }
    Ok(t.to_i32_vec()?)
}

fn region_maps(t: &TensorContainer, batch: usize, path: &Path) -> Result<Vec<RegionMap>> {
    let ctx = || format!("--regions {}", path.display());
    match t.shape() {
        [_, _] => Ok(vec![RegionMap::from_tensor(t).with_context(ctx)?]),
        &[n, h, w] => {
            if n != batch && n != 1 {
                bail!(Error::Validation(format!(
                    "{}: {n} region maps for a batch of {batch}",
                    ctx()
                )));
            }
            let labels = t.to_i32_vec().with_context(ctx)?;
            labels
                .chunks(h * w)
                .map(|c| RegionMap::new(h, w, c.to_vec()).with_context(ctx))
                .collect()
        }
        s => bail!(Error::Validation(format!(
            "{}: expected [H,W] or [B,H,W], got {s:?}",
            ctx()
        ))),
    }
}

fn loss(a: &LossArgs, run: &mut Run) -> Result<()> {
    let lambda = run.cfg.get("lambda", a.lambda, 50.0)?;
    let variance = parse_flag::<VarianceMode>(a.variance.as_deref(), "variance")?;
    let variance = run.cfg.get("variance", variance, VarianceMode::Unbiased)?;
    let exclude_background = run.cfg.flag("exclude-background", a.exclude_background)?;
    let ignore = run.cfg.get_opt("ignore-class", a.ignore_class)?;
    let write_grad = run.cfg.flag("grad", a.grad)?;

    let lt = run.load(&a.logits, "logits")?;
    let pred = LogitsCube::from_tensor(&lt).with_context(|| format!("--logits {}", a.logits.display()))?;
    let rt = run.load(&a.regions, "regions")?;
    let maps = region_maps(&rt, pred.batch, &a.regions)?;
    let config = LossConfig {
        variance,
        exclude_background,
    };
    let (region, region_grad) = RegionSmoothLoss::new(config).forward_backward(&pred, &maps)?;
    let (seg, seg_grad) = match &a.labels {
        Some(p) => {
            let t = run.load(p, "labels")?;
            let labels = labels_for(&t, &pred, "labels", p)?;
            pixel_ce_loss_grad(&pred, &labels, ignore).with_context(|| format!("--labels {}", p.display()))?
        }
        None => (0.0, vec![0.0; pred.logits.len()]),
    };
    let report = total_loss(seg, region.loss, lambda)?.with_counts(&region);
    run.text("loss.txt", &report.to_text())?;
    if write_grad {
        let g: Vec<f32> = seg_grad
            .iter()
            .zip(&region_grad)
            .map(|(s, r)| (s + lambda * r) as f32)
            .collect();
        run.tensor("grad.stsr", &TensorContainer::f32(pred.shape().to_vec(), g)?)?;
    }
    run.say("seg_loss", report.seg_loss);
    run.say("region_loss", report.region_loss);
    run.say("total", report.total);
    Ok(())
}

fn grad_check(a: &GradCheckArgs, run: &mut Run) -> Result<()> {
    let instances = run.cfg.get("instances", a.instances, 20usize)?;
    let tol = run.cfg.get("tol", a.tol, 1e-4)?;
    let seed = run.seed()?;
    let cases = grad_check_suite(instances, seed, Exec::default())?;
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let worst3 = cases.iter().map(|c| c.max_rel_error_3pt).fold(0.0, f64::max);
    let pass = worst <= tol;
    run.text("grad_check.csv", &grad_check_csv(&cases))?;
    run.text(
        "grad_check.txt",
        &format!("instances={instances}\nmax_rel_error={worst}\nmax_rel_error_3pt={worst3}\ntol={tol}\npass={pass}\n"),
    )?;
    run.say("instances", instances);
    run.say("max_rel_error", worst);
    run.say("pass", pass);
    if !pass {
        bail!(Error::Validation(format!("max relative error {worst} exceeds {tol}")));
    }
    Ok(())
}

fn metrics(a: &MetricsArgs, run: &mut Run) -> Result<()> {
    let ignore = run.cfg.get_opt("ignore-class", a.ignore_class)?;
    let pt = run.load(&a.pred, "pred")?;
    let tt = run.load(&a.truth, "truth")?;
    if pt.shape() != tt.shape() {
        bail!(Error::Validation(format!(
            "--pred {} has shape {:?}, --truth {} has {:?}",
            a.pred.display(),
            pt.shape(),
            a.truth.display(),
            tt.shape()
        )));
    }
    let pred = pt
        .to_i32_vec()
        .with_context(|| format!("--pred {}", a.pred.display()))?;
    let truth = tt
        .to_i32_vec()
        .with_context(|| format!("--truth {}", a.truth.display()))?;
    let inferred = pred
        .iter()
        .chain(&truth)
        .filter(|&&v| Some(v) != ignore)
        .max()
        .map_or(1, |&m| (m.max(0) + 1) as usize);
    let classes = run.cfg.get("classes", a.classes, inferred)?;
    let mut cm = ConfusionMatrix::new(classes, ignore);
    cm.accumulate(&pred, &truth)?;
    let report = cm.miou()?;
    let oa = cm.overall_accuracy()?;
    let mut confusion = String::from("truth,pred,count\n");
    for t in 0..classes {
        for p in 0..classes {
            writeln!(confusion, "{t},{p},{}", cm.get(t, p)).unwrap();
        }
    }
    run.text("metrics.txt", &metrics_text(&report, oa, &cm))?;
    run.text("iou.csv", &metrics_csv(&report))?;
    run.text("confusion.csv", &confusion)?;
    run.say("miou", report.miou);
    run.say("oa", oa);
    Ok(())
}

fn split(a: &SplitArgs, run: &mut Run) -> Result<()> {
    let ratio = run.cfg.get("ratio", a.ratio, 0.05)?;
    let stratified = run.cfg.flag("stratified", a.stratified)?;
    let seed = run.seed()?;
    let spec = match &a.labels {
        Some(p) => {
            let labels = run
                .load(p, "labels")?
                .to_i32_vec()
                .with_context(|| format!("--labels {}", p.display()))?;
            run.cfg.note("population", labels.len());
            if stratified {
                sample_split_stratified(ratio, seed, &labels)?
            } else {
                sample_split(ratio, seed, labels.len())?
            }
        }
        None => {
            if stratified {
                bail!(Error::Config("--stratified needs --labels".into()));
            }
            let population = run
                .cfg
                .get_opt("population", a.population)?
                .ok_or_else(|| Error::Config("split needs --population or --labels".into()))?;
            sample_split(ratio, seed, population)?
        }
    };
    let body: String = spec.selected.iter().map(|i| format!("{i}\n")).collect();
    run.text("split.txt", &body)?;
    run.say("selected", spec.selected.len());
    run.say("population", spec.population);
    Ok(())
}

fn augment(a: &AugmentArgs, run: &mut Run) -> Result<()> {
    let cube = load_cube(&a.cube, run)?;
    let params = cloud_params(&a.cube, run)?;
    let d = AugmentSpec::default();
    let crop = run.cfg.get("crop", a.crop, d.crop)?;
    let tdrop = run
        .cfg
        .get("tdrop", a.tdrop, Range2(d.temporal_drop.0, d.temporal_drop.1))?;
    let seed = run.seed()?;
    let spec = AugmentSpec {
        crop,
        temporal_drop: (tdrop.0, tdrop.1),
        seed,
    };
    let lt = run.load(&a.labels, "labels")?;
    if lt.shape() != [cube.height(), cube.width()] {
        bail!(Error::Validation(format!(
            "--labels {}: shape {:?}, cube frames are {}x{}",
            a.labels.display(),
            lt.shape(),
            cube.height(),
            cube.width()
        )));
    }
    let labels = lt.to_i32_vec()?;
    let fq = frame_quality(&cube, &params)?;
    let mut rng = SeededRng::new(seed);
    let c = spatial_crop(&cube, &labels, &spec, &mut rng)?;
    let (kept_cube, kept) = temporal_dropout(&c.cube, &spec, &mut rng, Some(&fq))?;
    let [t, ch, h, w] = kept_cube.shape();
    run.tensor(
        "AUG_CUBE.stsr",
        &TensorContainer::f32(vec![t, ch, h, w], kept_cube.to_raw())?,
    )?;
    run.tensor("AUG_LABELS.stsr", &TensorContainer::i32(vec![h, w], c.labels)?)?;
    let body: String = kept.iter().map(|i| format!("{i}\n")).collect();
    run.text("kept_frames.txt", &body)?;
    run.say("offset", format!("{},{}", c.offset.0, c.offset.1));
    run.say("kept_frames", join(&kept));
    Ok(())
}

fn synth_config(s: &SceneArgs, run: &mut Run) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let no_clouds = run.cfg.flag("no-clouds", s.no_clouds)?;
    Ok(SynthConfig {
        frames: run.cfg.get("frames", s.frames, d.frames)?,
        channels: run.cfg.get("channels", s.channels, d.channels)?,
        height: run.cfg.get("height", s.height, d.height)?,
        width: run.cfg.get("width", s.width, d.width)?,
        classes: run.cfg.get("classes", s.classes, d.classes)?,
        noise_sigma: run.cfg.get("noise", s.noise, d.noise_sigma)?,
        cloud_prob: run.cfg.get("cloud-prob", s.cloud_prob, d.cloud_prob)?,
        clouds: !no_clouds,
        ..d
    })
}

fn synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    let cfg = synth_config(&a.scene, run)?;
    let scale = run.cfg.get("scale", a.scale, DEFAULT_REFLECTANCE_SCALE)?;
    let seed = run.seed()?;
    let SynthScene {
        cube,
        labels,
        regions,
        cloud_frames,
    } = synth_sits(seed, &cfg)?;
    let s = scale as f64;
    let raw: Vec<f32> = cube.values().iter().map(|&v| (v as f64 * s) as f32).collect();
    run.tensor("cube.stsr", &TensorContainer::f32(cube.shape().to_vec(), raw)?)?;
    run.tensor(
        "labels.stsr",
        &TensorContainer::i32(vec![cfg.height, cfg.width], labels)?,
    )?;
    run.tensor("regions.stsr", &regions.to_tensor())?;
    let body: String = cloud_frames.iter().map(|i| format!("{i}\n")).collect();
    run.text("cloud_frames.txt", &body)?;
    run.say("band_map", cube.band_map());
    run.say("regions", regions.region_count());
    run.say("cloud_frames", join(&cloud_frames));
    Ok(())
}

fn history_row(s: &mut String, lambda: f64, label: &str, out: &TrainOutcome) {
    let l = out.last();
    writeln!(
        s,
        "{lambda},{label},{},{},{},{},{},{}",
        l.epoch, l.report.seg_loss, l.report.region_loss, l.report.total, l.train_miou, l.test_miou
    )
    .unwrap();
}

fn demo_train(a: &DemoTrainArgs, run: &mut Run) -> Result<()> {
    let scene_cfg = synth_config(&a.scene, run)?;
    let d = TrainConfig::default();
    let ratio = run.cfg.get("ratio", a.ratio, 0.01)?;
    let epochs = run.cfg.get("epochs", a.epochs, d.epochs)?;
    let lr = run.cfg.get("lr", a.lr, d.lr)?;
    let lambda = run.cfg.get_opt("lambda", a.lambda)?;
    let sweep = run.cfg.flag("sweep", a.sweep)?;
    let stratified = run.cfg.flag("stratified", a.stratified)?;
    let prior = run.cfg.get("prior", a.prior.clone(), "ideal".to_string())?;
    if sweep && lambda.is_some() {
        bail!(Error::Config("--sweep and --lambda are mutually exclusive".into()));
    }
    let seed = run.seed()?;

    let scene = synth_sits(seed, &scene_cfg)?;
    let regions = match prior.as_str() {
        "ideal" => scene.regions.clone(),
        "fallback" => {
            let fq = frame_quality(&scene.cube, &CloudParams::default())?;
            fallback_regions(&fuse_rgb(&scene.cube, &fq, Stretch::default())?, 8)?
        }
        "superpixels" => {
            let sites = run.cfg.get("sites", a.sites, 64usize)?;
            random_superpixels(scene_cfg.height, scene_cfg.width, sites, seed)?
        }
        other => bail!(Error::Config(format!(
            "--prior must be ideal, fallback or superpixels, got {other:?}"
        ))),
    };
    let q = regions.region_count() as f64;
    let stats = fit_norm(&[&scene.cube])?;
    let features = featurize(&apply_norm(&scene.cube, &stats)?);
    let split = if stratified {
        sample_split_stratified(ratio, seed, &scene.labels)?
    } else {
        sample_split(ratio, seed, scene.labels.len())?
    };
    let data = TrainData {
        features,
        truth: scene.labels.clone(),
        classes: scene_cfg.classes,
        regions,
        labeled: split.selected.clone(),
    };
    let lambdas: Vec<(f64, String)> = if sweep {
        vec![
            (0.0, "0".into()),
            (q / 5.0, "Q/5".into()),
            (q, "Q".into()),
            (5.0 * q, "5Q".into()),
        ]
    } else {
        vec![(lambda.unwrap_or(q), if lambda.is_some() { "flag" } else { "Q" }.into())]
    };
    let mut table = String::from("lambda,label,epoch,seg_loss,region_loss,total,train_miou,test_miou\n");
    for (i, (lam, label)) in lambdas.iter().enumerate() {
        let cfg = TrainConfig {
            lambda: Some(*lam),
            lr,
            epochs,
            seed,
            ..d.clone()
        };
        let out = train(&data, &cfg)?;
        let suffix = if sweep { format!("_{i}") } else { String::new() };
        let pred = crate::trainer::predict(&out.model, &data.features)?;
        run.text(&format!("history{suffix}.csv"), &out.history_csv())?;
        run.tensor(
            &format!("pred{suffix}.stsr"),
            &TensorContainer::i32(vec![scene_cfg.height, scene_cfg.width], pred.classes)?,
        )?;
        history_row(&mut table, *lam, label, &out);
        if !sweep {
            run.say("lambda", lam);
            run.say("test_miou", out.last().test_miou);
            run.say("region_loss", out.last().report.region_loss);
        }
    }
    run.text(if sweep { "sweep.csv" } else { "summary.csv" }, &table)?;
    run.say("regions", q);
    run.say("labeled", split.selected.len());
    Ok(())
}

fn bench(a: &BenchArgs, run: &mut Run) -> Result<()> {
    let sizes = run.cfg.get("sizes", a.sizes.clone(), List(vec![64, 128, 256]))?;
    let regions = run.cfg.get("regions", a.regions.clone(), List(vec![30, 100, 300]))?;
    let repeats = run.cfg.get("repeats", a.repeats, 5usize)?;
    let classes = run.cfg.get("classes", a.classes, 5usize)?;
    if repeats == 0 {
        bail!(Error::Config("--repeats must be at least 1".into()));
    }
    let seed = run.seed()?;
    let rows = run_bench(&sizes.0, &regions.0, classes, repeats, seed, Exec::default())?;
    let csv = bench_csv(&rows);
    run.volatile_text("bench.csv", &csv)?;
    run.say("rows", rows.len());
    Ok(())
}
