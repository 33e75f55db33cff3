//! `augment-preview`: the input image followed by augmented views, as one PNG grid.

use std::path::PathBuf;

use clap::Args;
use simreg::augmentation::Pipeline;
use simreg::data::{synth_dataset, Normalization, SynthSpec};
use simreg::image::{Filter, Image};
use simreg::rng::{fork, seeded};

use crate::{CliResult, Failure, OUT_ENV};

const COLUMNS: usize = 5;
const GAP: usize = 2;

#[derive(Args, Debug, Clone)]
pub struct PreviewArgs {
    /// Augmentation level 0-6.
    #[arg(long)]
    pub level: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image to augment (default: a synthetic sample).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory (default: $SIMREG_OUT, or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of augmented views.
    #[arg(long, default_value_t = 9)]
    pub views: usize,
    /// Side the input is resized to before augmenting.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

pub fn preview(args: PreviewArgs) -> CliResult<()> {
    let pipeline = Pipeline::build(args.level).map_err(Failure::usage)?;
    if args.views == 0 || args.size < 8 {
        return Err(Failure::usage("--views must be positive and --size at least 8"));
    }
    let source = match &args.input {
        Some(p) => Image::load(p).map_err(Failure::usage)?,
        None => {
            synth_dataset(&SynthSpec::new(1, 3, args.size, args.seed))
                .map_err(Failure::runtime)?
                .1
                .samples
                .remove(0)
                .image
        }
    };
    let img = source
        .to_three_channels()
        .resize(args.size, args.size, Filter::Bilinear);
    let norm = Normalization::default();
    let pipeline = pipeline.with_normalization(norm);

    let mut rng = seeded(args.seed);
    let mut views: Vec<Image> = (0..args.views)
        .map(|_| pipeline.apply(&img, &mut fork(&mut rng)))
        .collect();
    if let Some(mixer) = pipeline.mixer() {
        // Views of the one input stand in for a batch.
        views = mixer.plan(views.len(), args.size, args.size, &mut rng).apply(&views);
    }
    let mut tiles = vec![img];
    tiles.extend(views.iter().map(|v| {
        let mut d = norm.denormalize(v);
        d.clamp01();
        d
    }));

    let cols = COLUMNS.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let s = args.size;
    let mut grid = Image::filled(3, rows * s + (rows - 1) * GAP, cols * s + (cols - 1) * GAP, 1.0);
    for (i, t) in tiles.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (s + GAP), (i % cols) * (s + GAP));
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    grid.set(c, oy + y, ox + x, t.get(c, y, x));
                }
            }
        }
    }

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("augment_level{}_seed{}.png", args.level, args.seed));
    grid.save_png(&path).map_err(Failure::runtime)?;
    println!("{}", path.display());
    Ok(())
}
