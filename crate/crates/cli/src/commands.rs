use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use geocond::datagen::{make_training_sample, PatternFamily};
use geocond::evalfid::{
    conditioning_displacement, displacement_error_masked, estimate_displacement, ReportLine,
};
use geocond::lens::draw_rng;
use geocond::sphere::{sphere_metric_pack, sphere_positional_density, sphere_positional_field};
use geocond::{
    density, pullback_metric, remap, unwarp, warp_field_from_lens, ConditioningMode, ConditioningPack, FieldFile,
    Frame, WarpField,
};
use geocond_diffusion::checkpoint;
use geocond_diffusion::model::ATTENTION_FACTORS;
use geocond_diffusion::{fit, sample, Denoiser, DiffusionSchedule, SampleRequest, Trainer};

use crate::args::{Command, DatasetCommand, EvalCommand, FieldCommand};
use crate::config::{Echo, FileConfig};
use crate::error::{CliError, Result};
use crate::io::{create_dir, load_field, read_png, save_field, write_mask, write_png, write_text};
use crate::selftest;

/// Everything a command needs besides its own flags.
pub struct Context {
    pub seed: u64,
    pub threads: usize,
    pub file: FileConfig,
}

/// Runs `cmd`, writing the resolved configuration to `log` and reports to
/// `out`.
pub fn execute(cmd: &Command, ctx: &Context, out: &mut dyn std::io::Write, log: &mut dyn std::io::Write) -> Result<()> {
    let mut echo = |e: &Echo| -> Result<()> {
        write!(log, "# resolved configuration\n{}", e.render())?;
        Ok(())
    };
    let new_echo = |name: &str| Echo::new(name, ctx.seed, ctx.threads);
    let f = &ctx.file;
    match cmd {
        Command::Field(fc) => match fc {
            FieldCommand::Lens { lens, size, out: path } => {
                let l = lens.overlay(&f.lens).resolve()?;
                let (h, w) = size.overlay(&f.size).resolve((64, 64));
                echo(new_echo("field lens").lens(&l).set("height", h as i64).set("width", w as i64).path("out", path))?;
                let field = warp_field_from_lens(&l, h, w)?;
                save_field(&FieldFile::from(&field), path)
            }
            FieldCommand::SpherePos { size, out: path } => {
                let (h, w) = size.overlay(&f.size).resolve((64, 128));
                echo(new_echo("field sphere-pos").set("height", h as i64).set("width", w as i64).path("out", path))?;
                save_field(&FieldFile::from(&sphere_positional_field(h, w)?), path)
            }
            FieldCommand::SphereMetric {
                size,
                out: path,
                density_out,
            } => {
                let (h, w) = size.overlay(&f.size).resolve((64, 128));
                let mut e = new_echo("field sphere-metric");
                e.set("height", h as i64).set("width", w as i64).path("out", path);
                if let Some(d) = density_out {
                    e.path("density_out", d);
                }
                echo(&e)?;
                let (metric, dens) = sphere_metric_pack(h, w)?;
                save_field(&FieldFile::from(&metric), path)?;
                if let Some(d) = density_out {
                    save_field(&FieldFile::from(&dens), d)?;
                }
                Ok(())
            }
        },
        Command::Warp {
            input,
            field,
            lens,
            out: path,
            coverage_out,
        } => {
            let src = read_png(input)?;
            let mut e = new_echo("warp");
            e.path("input", input).path("out", path);
            let field = match field {
                Some(p) => {
                    if !lens.is_empty() {
                        return Err(CliError::validation("field: lens flags cannot be combined with --field"));
                    }
                    e.path("field", p);
                    WarpField::try_from(&load_field(p)?)?
                }
                None => {
                    let l = lens.overlay(&f.lens).resolve()?;
                    e.lens(&l);
                    warp_field_from_lens(&l, src.height(), src.width())?
                }
            };
            echo(&e)?;
            let (img, cov) = remap(&src, &field, &Frame::new(src.height(), src.width())?)?;
            write_png(&img, path)?;
            if let Some(c) = coverage_out {
                write_mask(&cov, c)?;
            }
            Ok(())
        }
        Command::Unwarp {
            input,
            field,
            out: path,
            size,
            coverage_out,
        } => {
            let img = read_png(input)?;
            let wf = WarpField::try_from(&load_field(field)?)?;
            let (h, w) = size.resolve((img.height(), img.width()));
            echo(new_echo("unwarp").path("input", input).path("field", field).path("out", path).set("height", h as i64).set("width", w as i64))?;
            let (rect, cov) = unwarp(&img, &wf, h, w)?;
            write_png(&rect, path)?;
            if let Some(c) = coverage_out {
                write_mask(&cov, c)?;
            }
            Ok(())
        }
        Command::Density { field, out: path } => {
            echo(new_echo("density").path("field", field).path("out", path))?;
            let wf = WarpField::try_from(&load_field(field)?)?;
            save_field(&FieldFile::from(&density(&wf)?), path)
        }
        Command::Metric { field, out: path } => {
            echo(new_echo("metric").path("field", field).path("out", path))?;
            let wf = WarpField::try_from(&load_field(field)?)?;
            save_field(&FieldFile::from(&pullback_metric(&wf)?), path)
        }
        Command::Dataset(DatasetCommand::Gen {
            out: dir,
            count,
            resolution,
            progress,
            mode,
            corpus,
        }) => {
            let mode = match mode {
                Some(m) => m.parse::<ConditioningMode>()?,
                None => match &f.model.mode {
                    Some(m) => m.parse()?,
                    None => ConditioningMode::Positional,
                },
            };
            let cc = corpus.overlay(&f.corpus).resolve(mode)?;
            if !(0.0..=1.0).contains(progress) {
                return Err(CliError::validation("progress: must lie in [0, 1]"));
            }
            echo(new_echo("dataset gen")
                .path("out", dir)
                .set("count", *count as i64)
                .set("resolution", *resolution as i64)
                .set("progress", *progress)
                .set("mode", mode.to_string())
                .corpus(&cc))?;
            create_dir(dir)?;
            let mut manifest = Manifest::default();
            for i in 0..*count {
                let mut rng = draw_rng(ctx.seed, i as u64);
                let s = make_training_sample(&mut rng, *progress, *resolution, &cc)?;
                let stem = format!("{i:05}");
                write_png(&s.image, &dir.join(format!("{stem}.png")))?;
                save_field(&FieldFile::from(&s.field), &dir.join(format!("{stem}.field.cfd")))?;
                manifest.sample.push(ManifestEntry {
                    index: i,
                    class: s.class,
                    family: s.spec.family.name().into(),
                    frequency: s.spec.frequency,
                    phase: s.spec.phase,
                    palette_seed: s.spec.palette_seed.to_string(),
                    lens: [s.lens.k1, s.lens.k2, s.lens.p1, s.lens.p2, s.lens.cx, s.lens.cy, s.lens.focal],
                    coverage: s.coverage.fraction(),
                });
            }
            let text = toml::to_string(&manifest).map_err(|e| CliError::validation(e.to_string()))?;
            write_text(&dir.join("manifest.toml"), &text)
        }
        Command::Train {
            out: path,
            resume,
            log_every,
            model,
            corpus,
            train,
        } => {
            let (tc, run) = train.overlay(&f.train).resolve(ctx.seed)?;
            let mut trainer = match resume {
                Some(p) => {
                    let ck = checkpoint::load_file(p)?;
                    let step = ck.step as usize;
                    let ema = ck.sampling_weights();
                    Trainer::new(ck.model, tc.clone())?.with_ema(ema, step)
                }
                None => {
                    let probe = corpus.overlay(&f.corpus).resolve(ConditioningMode::Positional)?;
                    let mc = model.overlay(&f.model).resolve(probe.families.len(), ctx.seed)?;
                    Trainer::new(Denoiser::new(mc)?, tc.clone())?
                }
            };
            let mc = trainer.model().config().clone();
            let cc = corpus.overlay(&f.corpus).resolve(mc.mode)?;
            if cc.families.len() != mc.num_classes {
                return Err(CliError::validation(format!(
                    "families: {} given, checkpoint has {} classes",
                    cc.families.len(),
                    mc.num_classes
                )));
            }
            let mut e = new_echo("train");
            e.path("out", path)
                .model(&mc)
                .corpus(&cc)
                .set("steps", run.steps as i64)
                .set("batch_size", run.batch_size as i64)
                .set("learning_rate", tc.learning_rate)
                .set("warmup_steps", tc.warmup_steps as i64)
                .set("ema_decay", tc.ema_decay);
            if let Some(r) = resume {
                e.path("resume", r);
            }
            echo(&e)?;
            let every = (*log_every).max(1);
            let mut acc = 0.0f64;
            let mut io_err = None;
            fit(&mut trainer, &cc, &run, |step, loss| {
                acc += loss as f64;
                if step % every == 0 {
                    if let Err(e) = writeln!(out, "step {step} loss {:.5}", acc / every as f64) {
                        io_err.get_or_insert(e);
                    }
                    acc = 0.0;
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            let ema = trainer.ema().to_vec();
            checkpoint::save_file(path, trainer.model(), Some(&ema), trainer.step() as u64)?;
            Ok(())
        }
        Command::Sample {
            checkpoint: ck_path,
            out: dir,
            field,
            sphere,
            size,
            lens,
            sample: sa,
            no_reweight,
            raw_weights,
        } => {
            let ck = checkpoint::load_file(ck_path)?;
            let mc = ck.model.config().clone();
            let (opts, count, class) = sa.overlay(&f.sample).resolve(ctx.seed)?;
            let mut e = new_echo("sample");
            e.path("checkpoint", ck_path)
                .path("out", dir)
                .set("steps", opts.steps as i64)
                .set("count", count as i64)
                .set("class", class as i64)
                .set("reweighting", !no_reweight)
                .set("weights", if *raw_weights { "raw" } else { "ema" })
                .model(&mc);
            if let Some(s) = opts.seam_fraction {
                e.set("seam_fraction", s);
            }
            let pack = if *sphere {
                let (h, w) = size.overlay(&f.size).resolve((mc.resolution, 2 * mc.resolution));
                e.set("conditioning", "sphere").set("height", h as i64).set("width", w as i64);
                sphere_pack(mc.mode, h, w)?
            } else if let Some(p) = field {
                e.path("field", p);
                let wf = WarpField::try_from(&load_field(p)?)?;
                ConditioningPack::from_field(&wf, mc.mode, &ATTENTION_FACTORS)?
            } else {
                let l = lens.overlay(&f.lens).resolve()?;
                let (h, w) = size.overlay(&f.size).resolve((mc.resolution, mc.resolution));
                e.lens(&l).set("height", h as i64).set("width", w as i64);
                let wf = warp_field_from_lens(&l, h, w)?;
                ConditioningPack::from_field(&wf, mc.mode, &ATTENTION_FACTORS)?
            };
            echo(&e)?;
            let pack = if *no_reweight { pack.without_reweighting() } else { pack };
            let params = if *raw_weights { ck.model.tensors() } else { ck.sampling_weights() };
            let reqs: Vec<SampleRequest> = (0..count)
                .map(|i| SampleRequest {
                    pack: &pack,
                    class,
                    index: i as u64,
                })
                .collect();
            create_dir(dir)?;
            let schedule = DiffusionSchedule::cosine(mc.timesteps);
            for (chunk_idx, chunk) in reqs.chunks(8).enumerate() {
                let imgs = sample(&ck.model, &params, &schedule, chunk, &opts)?;
                for (j, img) in imgs.iter().enumerate() {
                    write_png(img, &dir.join(format!("{:05}.png", chunk_idx * 8 + j)))?;
                }
            }
            Ok(())
        }
        Command::Eval(EvalCommand::Fidelity {
            input,
            family,
            field,
            control,
            expect_k1,
        }) => {
            let fam: PatternFamily = family.parse()?;
            let mut e = new_echo("eval fidelity");
            e.path("input", input).set("family", fam.name());
            if let Some(p) = field {
                e.path("field", p);
            }
            if let Some(p) = control {
                e.path("control", p);
            }
            if let Some(k) = expect_k1 {
                e.set("expect_k1", *k);
            }
            echo(&e)?;
            let lines = fidelity_report(input, fam, field.as_deref(), control.as_deref(), *expect_k1)?;
            write_lines(out, &lines)
        }
        Command::Selftest { cases } => {
            echo(new_echo("selftest").set("cases", *cases as i64))?;
            let lines = selftest::run(ctx.seed, *cases)?;
            write_lines(out, &lines)?;
            if lines.iter().all(|l| l.pass) {
                Ok(())
            } else {
                Err(CliError::validation("selftest: a check failed"))
            }
        }
    }
}

fn write_lines(out: &mut dyn std::io::Write, lines: &[ReportLine]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{l}");
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Conditioning for an equirectangular panorama.
pub fn sphere_pack(mode: ConditioningMode, height: usize, width: usize) -> Result<ConditioningPack> {
    let d = sphere_positional_density(height, width)?;
    Ok(match mode {
        ConditioningMode::Positional => {
            ConditioningPack::positional(&sphere_positional_field(height, width)?, &d, &ATTENTION_FACTORS)?
        }
        ConditioningMode::Metric => {
            let (m, d) = sphere_metric_pack(height, width)?;
            ConditioningPack::metric(&m, &d, &ATTENTION_FACTORS)?
        }
    })
}

fn fidelity_report(
    input: &Path,
    family: PatternFamily,
    field: Option<&Path>,
    control: Option<&Path>,
    expect_k1: Option<f64>,
) -> Result<Vec<ReportLine>> {
    let img = read_png(input)?;
    let est = estimate_displacement(&img, family)?;
    let mut lines = vec![
        ReportLine {
            metric: "k1_estimate".into(),
            value: est.k1,
            tolerance: "reliable".into(),
            pass: est.reliable,
        },
        ReportLine {
            metric: "separability_residual".into(),
            value: est.residual,
            tolerance: "<=0.25".into(),
            pass: est.residual <= 0.25,
        },
    ];
    if let Some(k) = expect_k1 {
        let rel = (est.k1 - k).abs() / k.abs().max(f64::MIN_POSITIVE);
        lines.push(ReportLine {
            metric: "k1_relative_error".into(),
            value: rel,
            tolerance: "<=0.1".into(),
            pass: rel <= 0.1,
        });
    }
    if let Some(p) = field {
        let wf = WarpField::try_from(&load_field(p)?)?;
        if (wf.height(), wf.width()) != (img.height(), img.width()) {
            return Err(CliError::validation(format!(
                "field: {}x{} does not match the {}x{} image",
                wf.height(),
                wf.width(),
                img.height(),
                img.width()
            )));
        }
        let cond = conditioning_displacement(&wf, img.height().min(img.width()));
        let valid = geocond::Coverage {
            height: wf.height(),
            width: wf.width(),
            mask: wf.valid().to_vec(),
        };
        let err = displacement_error_masked(&est.displacement, &cond, &valid)?;
        lines.push(ReportLine {
            metric: "displacement_error".into(),
            value: err,
            tolerance: "report".into(),
            pass: true,
        });
        if let Some(c) = control {
            let cimg = read_png(c)?;
            let cest = estimate_displacement(&cimg, family)?;
            let cerr = displacement_error_masked(&cest.displacement, &cond, &valid)?;
            let ratio = err / cerr.max(1e-9);
            lines.push(ReportLine {
                metric: "control_displacement_error".into(),
                value: cerr,
                tolerance: "report".into(),
                pass: true,
            });
            lines.push(ReportLine {
                metric: "displacement_error_ratio".into(),
                value: ratio,
                tolerance: "<=2".into(),
                pass: ratio <= 2.0,
            });
        }
    } else if control.is_some() {
        return Err(CliError::validation("control: needs --field to compare against"));
    }
    Ok(lines)
}

#[derive(Debug, Default, Serialize)]
struct Manifest {
    sample: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    index: usize,
    class: usize,
    family: String,
    frequency: f64,
    phase: f64,
    /// Decimal, as TOML integers stop at 2^63.
    palette_seed: String,
    /// k1, k2, p1, p2, cx, cy, focal.
    lens: [f64; 7],
    coverage: f64,
}
