use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use maskgen::metrics::{
    frechet_distance, image_features, knn_density_coverage, knn_precision_recall, token_histogram_kl, FeatureSet,
    ReferenceDistribution, Source, SpeedupRow, DEFAULT_K, SPEEDUP_HEADER,
};
use maskgen::sampler::{autoregressive_baseline, decode, decode_batch, decode_jobs, DecodeJob, DecodeTrace, SamplerConfig};
use maskgen::tokenizer::{render_mask, render_tokens, Image, DOWNSAMPLE};
use maskgen::training::{curve_csv, Example, MaskSchedule, Trainer, CURVE_HEADER};
use maskgen::transformer::Transformer;

use crate::config::RunConfig;
use crate::pipeline::{self, write_file, Loaded, TOKENIZER_CKPT, TRANSFORMER_CKPT};
use crate::Failure;

pub const ABLATE_HEADER: &str = "scheduler,steps,kl,frechet,precision,recall,density,coverage,forwards,gumbel_temp,cfg";

/// Overrides for the checkpoint's `[sampler]` section.
#[derive(Debug, Clone, Args)]
pub struct SamplerFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub schedule: Option<MaskSchedule>,
    #[arg(long)]
    pub softmax_temp: Option<f32>,
    #[arg(long)]
    pub gumbel_temp: Option<f32>,
    #[arg(long)]
    pub cfg: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SamplerFlags {
    fn apply(&self, base: SamplerConfig) -> Result<SamplerConfig, Failure> {
        let sc = SamplerConfig {
            steps: self.steps.unwrap_or(base.steps),
            schedule: self.schedule.unwrap_or(base.schedule),
            softmax_temp: self.softmax_temp.unwrap_or(base.softmax_temp),
            gumbel_temp: self.gumbel_temp.unwrap_or(base.gumbel_temp),
            cfg_weight: self.cfg.unwrap_or(base.cfg_weight),
            seed: self.seed.unwrap_or(base.seed),
            snapshot_every: base.snapshot_every,
        };
        sc.validate()?;
        Ok(sc)
    }
}

fn check_steps(sc: &SamplerConfig, n: usize) -> Result<(), Failure> {
    if sc.steps > n {
        return Err(Failure::Usage(format!("steps = {} exceeds the {n} tokens of a grid", sc.steps)));
    }
    Ok(())
}

fn check_class(class: Option<usize>, classes: usize) -> Result<(), Failure> {
    match class {
        Some(c) if c >= classes => Err(Failure::Usage(format!("class {c} but the model has {classes} classes"))),
        _ => Ok(()),
    }
}

fn trace_jsonl(trace: &DecodeTrace) -> String {
    trace.steps.iter().map(|s| s.json() + "\n").collect()
}

fn to_examples(traces: &[DecodeTrace]) -> Vec<Example> {
    traces
        .iter()
        .map(|t| Example {
            tokens: t.tokens.clone(),
            label: t.label.unwrap_or(0),
        })
        .collect()
}

/// Share of the tokens used by the training set that also appear in the
/// samples.
fn coverage_tokens(samples: &[Example], reference_used: &[bool]) -> f64 {
    let mut seen = vec![false; reference_used.len()];
    for t in samples.iter().flat_map(|e| &e.tokens) {
        seen[*t] = true;
    }
    let used = reference_used.iter().filter(|&&u| u).count().max(1);
    seen.iter().zip(reference_used).filter(|(&s, &u)| s && u).count() as f64 / used as f64
}

fn cycled_labels(n: usize, classes: usize) -> Vec<Option<usize>> {
    (0..n).map(|i| Some(i % classes)).collect()
}

fn stack_rows(top: &Image, bottom: &Image) -> Result<Image, Failure> {
    let mut data = top.data.clone();
    data.extend_from_slice(&bottom.data);
    Ok(Image::new(top.height + bottom.height, top.width, top.channels, data)?)
}

pub fn train_vq(config: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let dir = pipeline::prepare_run_dir(&cfg)?;
    let data = pipeline::load_dataset(&cfg)?;
    let (vq, rows) = pipeline::train_tokenizer(&cfg, &data.images)?;
    let ckpt = pipeline::checkpoints_dir(&cfg).join(TOKENIZER_CKPT);
    fs::create_dir_all(pipeline::checkpoints_dir(&cfg)).map_err(|e| Failure::Runtime(e.to_string()))?;
    pipeline::tokenizer_checkpoint(&cfg, &vq).save(&ckpt)?;
    write_file(&dir.join("vq_loss.csv"), pipeline::vq_loss_csv(&rows))?;
    let last = rows.last().expect("at least one epoch");
    println!(
        "tokenizer trained on {} images: final recon {:.5}, checkpoint {}",
        data.images.len(),
        last[0],
        ckpt.display()
    );
    Ok(())
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let dir = pipeline::prepare_run_dir(&cfg)?;
    let ckpt_dir = pipeline::checkpoints_dir(&cfg);
    let vq = pipeline::load_tokenizer(&ckpt_dir.join(TOKENIZER_CKPT))?;
    pipeline::check_compatible(&cfg, &vq)?;
    let data = pipeline::load_dataset(&cfg)?;
    let examples = pipeline::encode_dataset(&vq, &data)?;
    let tc = cfg.transformer;
    let reference = ReferenceDistribution::empirical(&examples, tc.codebook_size, tc.grid_width, tc.num_classes)?;
    let mut used = vec![false; tc.codebook_size];
    examples.iter().flat_map(|e| &e.tokens).for_each(|&t| used[t] = true);

    let curve_path = dir.join("metrics.csv");
    let (mut trainer, mut prior_rows) = match resume {
        None => (Trainer::new(Transformer::new(tc, cfg.run.seed)?, cfg.train)?, Vec::new()),
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("resume checkpoint {} not found", path.display())));
            }
            let mut t = Trainer::from_checkpoint(&maskgen::training::Checkpoint::load(path)?)?;
            if *t.model.config() != tc {
                return Err(Failure::Usage("[transformer] differs from the checkpoint being resumed".into()));
            }
            if (maskgen::training::TrainConfig { epochs: cfg.train.epochs, ..t.config }) != cfg.train {
                return Err(Failure::Usage("[train] differs from the checkpoint being resumed (only epochs may change)".into()));
            }
            t.config.epochs = cfg.train.epochs;
            let done = t.epoch(examples.len()) as usize;
            let rows: Vec<String> = fs::read_to_string(&curve_path)
                .unwrap_or_default()
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= done))
                .map(str::to_string)
                .collect();
            (t, rows)
        }
    };

    let extra = cfg.to_table();
    let vq_tensors: Vec<(String, maskgen::numerics::Tensor)> = pipeline::tokenizer_checkpoint(&cfg, &vq)
        .tensors
        .into_iter()
        .map(|(n, t)| (format!("vq.{n}"), t))
        .collect();
    let labels = cycled_labels(cfg.run.eval_samples, tc.num_classes);
    let eval_sampler = cfg.sampler;
    let eval = |m: &Transformer, _epoch: usize| {
        let traces = decode_batch(m, &labels, &eval_sampler)?;
        let samples = to_examples(&traces);
        Ok((token_histogram_kl(&samples, &reference)?, coverage_tokens(&samples, &used)))
    };
    let every = cfg.run.checkpoint_every;
    let on_epoch = |t: &Trainer, rec: &maskgen::training::EpochRecord| -> maskgen::Result<()> {
        let row = curve_csv(std::slice::from_ref(rec));
        prior_rows.push(row.lines().nth(1).unwrap_or_default().to_string());
        let mut text = format!("{CURVE_HEADER}\n");
        prior_rows.iter().for_each(|r| text += &format!("{r}\n"));
        std::fs::write(&curve_path, text).map_err(|e| maskgen::Error::Io {
            path: curve_path.clone(),
            source: e,
        })?;
        let mut ck = t.to_checkpoint(&extra)?;
        ck.tensors.extend(vq_tensors.iter().cloned());
        ck.save(&ckpt_dir.join(TRANSFORMER_CKPT))?;
        if rec.epoch % every == 0 {
            ck.save(&ckpt_dir.join(format!("transformer-epoch-{:04}.mgdc", rec.epoch)))?;
        }
        println!("epoch {:>3}: loss {:.4}, kl {:.4}, coverage_tokens {:.3}", rec.epoch, rec.loss, rec.kl, rec.coverage_tokens);
        Ok(())
    };
    let records = trainer.train(&examples, eval, on_epoch)?;
    if records.is_empty() {
        println!("nothing to do: checkpoint already at {} epochs", cfg.train.epochs);
    }
    Ok(())
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub class: Option<usize>,
    pub flags: &'a SamplerFlags,
    pub count: usize,
    pub snapshots: bool,
    pub out: Option<&'a Path>,
}

pub fn sample(a: SampleArgs<'_>) -> Result<(), Failure> {
    let Loaded {
        config,
        model,
        tokenizer,
        run_dir,
    } = pipeline::load_transformer(a.checkpoint)?;
    let mut sc = a.flags.apply(config.sampler)?;
    let tc = *model.config();
    check_steps(&sc, tc.grid_len())?;
    check_class(a.class, tc.num_classes)?;
    if a.count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    if a.snapshots && sc.snapshot_every.is_none() {
        sc.snapshot_every = Some(1);
    }
    let out = a.out.map(Path::to_path_buf).unwrap_or(run_dir);
    let traces = decode_batch(&model, &vec![a.class; a.count], &sc)?;
    let grids: Vec<_> = traces.iter().map(|t| pipeline::grid_of(&tokenizer, &t.tokens)).collect();
    let images = pipeline::decode_grids(&tokenizer, &grids)?;
    let (gh, gw) = (tc.grid_height, tc.grid_width);
    for (i, (trace, img)) in traces.iter().zip(&images).enumerate() {
        write_file(&out.join("samples").join(format!("sample_{i:04}.{}", image_ext(img))), img.to_bytes())?;
        write_file(&out.join("traces").join(format!("sample_{i:04}.jsonl")), trace_jsonl(trace))?;
        if a.snapshots {
            let steps: Vec<_> = trace.steps.iter().filter(|s| s.snapshot).collect();
            let masks = steps
                .iter()
                .map(|s| render_mask(&s.mask, gh, gw, DOWNSAMPLE))
                .collect::<maskgen::Result<Vec<_>>>()?;
            let tokens = steps
                .iter()
                .map(|s| render_tokens(&s.tokens, gh, gw, tc.codebook_size + 1, DOWNSAMPLE))
                .collect::<maskgen::Result<Vec<_>>>()?;
            let sheet = stack_rows(&Image::tile_row(&masks)?, &Image::tile_row(&tokens)?)?;
            write_file(&out.join("samples").join(format!("sample_{i:04}_steps.pgm")), sheet.to_bytes())?;
        }
    }
    println!(
        "{} samples in {} ({} forwards each)",
        traces.len(),
        out.join("samples").display(),
        traces[0].forwards
    );
    Ok(())
}

fn image_ext(img: &Image) -> &'static str {
    if img.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

pub struct InpaintArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub mask: &'a Path,
    pub class: Option<usize>,
    pub flags: &'a SamplerFlags,
    pub output: &'a Path,
}

/// A token position is frozen when every pixel of its patch is white.
fn frozen_positions(mask: &Image, grid_height: usize, grid_width: usize) -> Vec<bool> {
    let (ph, pw) = (mask.height / grid_height, mask.width / grid_width);
    (0..grid_height * grid_width)
        .map(|p| {
            let (gy, gx) = (p / grid_width, p % grid_width);
            (gy * ph..(gy + 1) * ph).all(|y| (gx * pw..(gx + 1) * pw).all(|x| (0..mask.channels).all(|c| mask.get(y, x, c) >= 0.5)))
        })
        .collect()
}

pub fn inpaint(a: InpaintArgs<'_>) -> Result<(), Failure> {
    let Loaded { model, tokenizer, config, .. } = pipeline::load_transformer(a.checkpoint)?;
    let tc = *model.config();
    check_class(a.class, tc.num_classes)?;
    let image = Image::load(a.image).map_err(|e| Failure::Usage(e.to_string()))?;
    let mask = Image::load(a.mask).map_err(|e| Failure::Usage(e.to_string()))?;
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Failure::Usage(format!(
            "mask is {}×{} but image is {}×{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    let vc = tokenizer.config();
    if (image.height, image.width, image.channels) != (vc.image_height, vc.image_width, vc.channels) {
        return Err(Failure::Usage(format!(
            "image is {}×{}×{}, tokenizer expects {}×{}×{}",
            image.height, image.width, image.channels, vc.image_height, vc.image_width, vc.channels
        )));
    }
    let mut sc = a.flags.apply(config.sampler)?;
    check_steps(&sc, tc.grid_len())?;
    let frozen = frozen_positions(&mask, tc.grid_height, tc.grid_width);
    let free = frozen.iter().filter(|&&f| !f).count();
    if free > 0 && sc.steps > free {
        eprintln!("note: only {free} positions to fill, using {free} steps");
        sc.steps = free;
    }
    let grid = tokenizer.encode_image(&image)?;
    let job = DecodeJob {
        label: a.class,
        tokens: grid.tokens.clone(),
        frozen,
    };
    let trace = decode_jobs(&model, &[job], &sc)?.remove(0);
    let out = tokenizer.decode_tokens(&pipeline::grid_of(&tokenizer, &trace.tokens))?;
    write_file(a.output, out.to_bytes())?;
    write_file(&a.output.with_extension("jsonl"), trace_jsonl(&trace))?;
    let tokens: Vec<String> = trace.tokens.iter().map(usize::to_string).collect();
    write_file(&a.output.with_extension("tokens"), tokens.join(" ") + "\n")?;
    println!(
        "inpainted {free} of {} tokens into {} ({} forwards)",
        tc.grid_len(),
        a.output.display(),
        trace.forwards
    );
    Ok(())
}

pub struct AblateArgs<'a> {
    pub checkpoint: &'a Path,
    pub schedules: &'a [MaskSchedule],
    pub steps: &'a [usize],
    pub gumbel: &'a [f32],
    pub cfg: &'a [f32],
    pub count: usize,
    pub output: Option<&'a Path>,
}

fn feature_set(images: &[Image], source: Source) -> Result<FeatureSet, Failure> {
    let rows = images
        .iter()
        .map(|i| image_features(&i.data, i.height, i.width, i.channels))
        .collect::<maskgen::Result<Vec<_>>>()?;
    Ok(FeatureSet::from_rows(&rows, source)?)
}

pub fn ablate(a: AblateArgs<'_>) -> Result<(), Failure> {
    if a.schedules.is_empty() && a.steps.is_empty() && a.gumbel.is_empty() && a.cfg.is_empty() {
        return Err(Failure::Usage(
            "empty sweep: give at least one of --schedules, --steps, --gumbel, --cfg".into(),
        ));
    }
    if a.count < DEFAULT_K + 1 {
        return Err(Failure::Usage(format!("--count must be at least {}", DEFAULT_K + 1)));
    }
    let Loaded {
        config,
        model,
        tokenizer,
        run_dir,
    } = pipeline::load_transformer(a.checkpoint)?;
    let tc = *model.config();
    let base = config.sampler;
    let or_base = |v: &[f32], b: f32| if v.is_empty() { vec![b] } else { v.to_vec() };
    let schedules = if a.schedules.is_empty() { vec![base.schedule] } else { a.schedules.to_vec() };
    let steps = if a.steps.is_empty() { vec![base.steps] } else { a.steps.to_vec() };
    let gumbels = or_base(a.gumbel, base.gumbel_temp);
    let cfgs = or_base(a.cfg, base.cfg_weight);
    for &t in &steps {
        check_steps(&SamplerConfig { steps: t, ..base }, tc.grid_len())?;
    }

    let data = pipeline::load_dataset(&config)?;
    let examples = pipeline::encode_dataset(&tokenizer, &data)?;
    let reference = ReferenceDistribution::empirical(&examples, tc.codebook_size, tc.grid_width, tc.num_classes)?;
    let real_images: Vec<Image> = data.images.iter().take(a.count).cloned().collect();
    let real = feature_set(&real_images, Source::Real)?;
    let labels = cycled_labels(a.count, tc.num_classes);

    let mut csv = format!("{ABLATE_HEADER}\n");
    for &schedule in &schedules {
        for &t in &steps {
            for &g in &gumbels {
                for &w in &cfgs {
                    let sc = SamplerConfig {
                        schedule,
                        steps: t,
                        gumbel_temp: g,
                        cfg_weight: w,
                        ..base
                    };
                    sc.validate()?;
                    let traces = decode_batch(&model, &labels, &sc)?;
                    let kl = token_histogram_kl(&to_examples(&traces), &reference)?;
                    let grids: Vec<_> = traces.iter().map(|t| pipeline::grid_of(&tokenizer, &t.tokens)).collect();
                    let gen = feature_set(&pipeline::decode_grids(&tokenizer, &grids)?, Source::Generated)?;
                    let fd = frechet_distance(&real, &gen)?;
                    let (p, r) = knn_precision_recall(&real, &gen, DEFAULT_K)?;
                    let (d, c) = knn_density_coverage(&real, &gen, DEFAULT_K)?;
                    let row = format!(
                        "{schedule},{t},{kl:.6},{fd:.6},{p:.6},{r:.6},{d:.6},{c:.6},{},{g},{w}",
                        traces[0].forwards
                    );
                    println!("{row}");
                    csv += &row;
                    csv.push('\n');
                }
            }
        }
    }
    let path = a.output.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("ablate.csv"));
    write_file(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn bench(checkpoint: &Path, steps: &[usize], cfgs: &[f32], output: Option<&Path>) -> Result<(), Failure> {
    let Loaded {
        config, model, run_dir, ..
    } = pipeline::load_transformer(checkpoint)?;
    let n = model.config().grid_len();
    let base = config.sampler;
    let steps = if steps.is_empty() { vec![base.steps] } else { steps.to_vec() };
    let cfgs = if cfgs.is_empty() { vec![0.0, base.cfg_weight] } else { cfgs.to_vec() };
    for &t in &steps {
        check_steps(&SamplerConfig { steps: t, ..base }, n)?;
    }
    let start = Instant::now();
    let (_, ar) = autoregressive_baseline(&model, Some(0), base.softmax_temp, base.seed)?;
    let ar_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut csv = format!("{SPEEDUP_HEADER}\n");
    println!("autoregressive: {ar} forwards, {ar_ms:.1} ms");
    for &t in &steps {
        for &w in &cfgs {
            let sc = SamplerConfig {
                steps: t,
                cfg_weight: w,
                ..base
            };
            sc.validate()?;
            let start = Instant::now();
            let trace = decode(&model, Some(0), &sc)?;
            let row = SpeedupRow::new(t, w, trace.forwards, ar, start.elapsed().as_secs_f64() * 1e3)?;
            println!("{}", row.csv());
            csv += &row.csv();
            csv.push('\n');
        }
    }
    let path: PathBuf = output.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("bench.csv"));
    write_file(&path, csv)?;
    Ok(())
}
