//! Data loading, tokenizer training and checkpoint plumbing shared by the
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use maskgen::corpus::SyntheticCorpus;
use maskgen::numerics::AdamW;
use maskgen::numerics::AdamWConfig;
use maskgen::tokenizer::{render_tokens, Image, TokenGrid, VqAutoencoder, DOWNSAMPLE};
use maskgen::training::{derive_seed, Checkpoint, Example};
use maskgen::transformer::Transformer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, RunConfig};
use crate::Failure;

pub const TOKENIZER_CKPT: &str = "tokenizer.mgdc";
pub const TRANSFORMER_CKPT: &str = "transformer.mgdc";
pub const VQ_LOSS_HEADER: &str = "epoch,recon,codebook,commitment,total";

/// Images per encoder/decoder call; bounds peak memory.
const CODEC_CHUNK: usize = 64;

pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

pub fn checkpoints_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("checkpoints")
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Creates the run directory and echoes the resolved config into it.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.run_dir();
    write_file(&dir.join(crate::config::RESOLVED_NAME), cfg.resolved())?;
    Ok(dir)
}

pub fn synthetic_corpus(cfg: &RunConfig) -> SyntheticCorpus {
    SyntheticCorpus {
        codebook_size: cfg.data.levels,
        num_classes: cfg.data.classes,
        coupling: cfg.data.coupling,
        grid_height: cfg.tokenizer.grid_height(),
        grid_width: cfg.tokenizer.grid_width(),
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let tc = &cfg.tokenizer;
    let data = match cfg.data.source {
        DataSource::Synthetic => {
            if tc.channels != 1 {
                return Err(Failure::Usage(format!(
                    "the synthetic corpus is grayscale but tokenizer.channels = {}",
                    tc.channels
                )));
            }
            let corpus = synthetic_corpus(cfg);
            let grids = corpus
                .generate(cfg.data.examples, cfg.run.seed)
                .map_err(|e| Failure::Usage(format!("[data]: {e}")))?;
            let images = grids
                .iter()
                .map(|ex| render_tokens(&ex.tokens, corpus.grid_height, corpus.grid_width, corpus.codebook_size, DOWNSAMPLE))
                .collect::<maskgen::Result<Vec<_>>>()?;
            Dataset {
                images,
                labels: grids.iter().map(|e| e.label).collect(),
            }
        }
        DataSource::Images => load_image_dir(cfg.data.image_dir.as_deref().expect("validated"), cfg)?,
    };
    if data.images.is_empty() {
        return Err(Failure::Usage("dataset is empty".into()));
    }
    Ok(data)
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::Usage(format!("dataset directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_image_dir(dir: &Path, cfg: &RunConfig) -> Result<Dataset, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("dataset directory {} not found", dir.display())));
    }
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for entry in sorted_entries(dir)? {
        if entry.is_dir() {
            let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let class: usize = name
                .parse()
                .map_err(|_| Failure::Usage(format!("class directory `{name}` is not a class index")))?;
            if class >= cfg.data.classes {
                return Err(Failure::Usage(format!("class directory {class} but data.classes = {}", cfg.data.classes)));
            }
            files.extend(sorted_entries(&entry)?.into_iter().filter(|p| is_image(p)).map(|p| (p, class)));
        } else if is_image(&entry) {
            files.push((entry, 0));
        }
    }
    let tc = &cfg.tokenizer;
    let mut images = Vec::with_capacity(files.len());
    for (path, _) in &files {
        let img = Image::load(path)?;
        if (img.height, img.width, img.channels) != (tc.image_height, tc.image_width, tc.channels) {
            return Err(Failure::Usage(format!(
                "{} is {}×{}×{}, tokenizer expects {}×{}×{}",
                path.display(),
                img.height,
                img.width,
                img.channels,
                tc.image_height,
                tc.image_width,
                tc.channels
            )));
        }
        images.push(img);
    }
    Ok(Dataset {
        images,
        labels: files.iter().map(|(_, c)| *c).collect(),
    })
}

/// Trains the tokenizer; returns it with one `[recon, codebook,
/// commitment, total]` row of epoch means per epoch.
pub fn train_tokenizer(cfg: &RunConfig, images: &[Image]) -> Result<(VqAutoencoder, Vec<[f64; 4]>), Failure> {
    let tt = cfg.tokenizer_train;
    let mut vq = VqAutoencoder::new(cfg.tokenizer, cfg.run.seed)?;
    let init: Vec<Image> = images.iter().take(tt.batch_size.max(cfg.tokenizer.codebook_size)).cloned().collect();
    vq.init_codebook(&init, derive_seed(cfg.run.seed, 10, 0))?;
    let opt_cfg = AdamWConfig {
        lr: tt.lr,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, vq.params())?;
    let mut rows = Vec::with_capacity(tt.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..tt.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, 11, epoch as u64)));
        let mut sums = [0.0f64; 4];
        let mut batches = 0;
        for chunk in order.chunks(tt.batch_size) {
            let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let l = vq.train_step(&batch, &mut opt)?;
            for (s, v) in sums.iter_mut().zip([l.recon, l.codebook, l.commitment, l.total(cfg.tokenizer.beta)]) {
                *s += v as f64;
            }
            batches += 1;
        }
        rows.push(sums.map(|s| s / batches as f64));
    }
    Ok((vq, rows))
}

pub fn vq_loss_csv(rows: &[[f64; 4]]) -> String {
    let mut s = format!("{VQ_LOSS_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        s += &format!("{},{:.6},{:.6},{:.6},{:.6}\n", i + 1, r[0], r[1], r[2], r[3]);
    }
    s
}

pub fn encode_images(vq: &VqAutoencoder, images: &[Image]) -> Result<Vec<TokenGrid>, Failure> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CODEC_CHUNK) {
        out.extend(vq.encode_batch(chunk)?);
    }
    Ok(out)
}

pub fn decode_grids(vq: &VqAutoencoder, grids: &[TokenGrid]) -> Result<Vec<Image>, Failure> {
    let mut out = Vec::with_capacity(grids.len());
    for chunk in grids.chunks(CODEC_CHUNK) {
        out.extend(vq.decode_batch(chunk)?);
    }
    Ok(out)
}

pub fn grid_of(vq: &VqAutoencoder, tokens: &[usize]) -> TokenGrid {
    TokenGrid {
        height: vq.config().grid_height(),
        width: vq.config().grid_width(),
        tokens: tokens.to_vec(),
    }
}

pub fn encode_dataset(vq: &VqAutoencoder, data: &Dataset) -> Result<Vec<Example>, Failure> {
    Ok(encode_images(vq, &data.images)?
        .into_iter()
        .zip(&data.labels)
        .map(|(g, &label)| Example { tokens: g.tokens, label })
        .collect())
}

pub fn tokenizer_checkpoint(cfg: &RunConfig, vq: &VqAutoencoder) -> Checkpoint {
    Checkpoint {
        config: cfg.resolved(),
        tensors: vq
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), maskgen::numerics::Tensor::new(t.shape.clone(), t.data.clone()).expect("tensor")))
            .collect(),
    }
}

pub fn load_tokenizer(path: &Path) -> Result<VqAutoencoder, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!(
            "tokenizer checkpoint {} not found (run train-vq first)",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_checkpoint_text(&ck.config).map_err(Failure::Runtime)?;
    Ok(VqAutoencoder::from_tensors(cfg.tokenizer, &ck.tensors)?)
}

/// Checks the tokenizer and data agree with the transformer's vocabulary,
/// grid and classes.
pub fn check_compatible(cfg: &RunConfig, vq: &VqAutoencoder) -> Result<(), Failure> {
    let (t, v) = (&cfg.transformer, vq.config());
    if t.codebook_size != v.codebook_size {
        return Err(Failure::Usage(format!(
            "tokenizer codebook_size = {} but transformer codebook_size = {}",
            v.codebook_size, t.codebook_size
        )));
    }
    if (t.grid_height, t.grid_width) != (v.grid_height(), v.grid_width()) {
        return Err(Failure::Usage(format!(
            "tokenizer grid {}×{} but transformer grid {}×{}",
            v.grid_height(),
            v.grid_width(),
            t.grid_height,
            t.grid_width
        )));
    }
    if t.num_classes != cfg.data.classes {
        return Err(Failure::Usage(format!(
            "data.classes = {} but transformer num_classes = {}",
            cfg.data.classes, t.num_classes
        )));
    }
    Ok(())
}

/// Everything a sampling command needs from a transformer checkpoint.
pub struct Loaded {
    pub config: RunConfig,
    pub model: Transformer,
    pub tokenizer: VqAutoencoder,
    pub run_dir: PathBuf,
}

pub fn load_transformer(path: &Path) -> Result<Loaded, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let config = RunConfig::from_checkpoint_text(&ck.config).map_err(Failure::Runtime)?;
    let model = Transformer::from_tensors(config.transformer, &ck.with_prefix("model."))?;
    let tokenizer = VqAutoencoder::from_tensors(config.tokenizer, &ck.with_prefix("vq."))?;
    let run_dir = path
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Loaded {
        config,
        model,
        tokenizer,
        run_dir,
    })
}
