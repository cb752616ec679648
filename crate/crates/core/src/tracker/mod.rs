//! Per-sequence tracking: frame-1 initialisation, candidate scoring,
//! memory bookkeeping, short/long-term head updates and box regression.

mod config;
mod memory;
mod regressor;
mod state;

pub use config::TrackerConfig;
pub use memory::{Decision, MemoryStore, Schedule, UpdateKind};
pub use regressor::{
    apply_regressor, apply_transform, box_transform, train_box_regressor, BoxRegressor,
    MIN_REGRESSION_SAMPLES,
};
pub use state::{argmax, roi_features, FrameResult, Tracker};

use std::io::{BufRead, Write};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::sampling::BBox;

/// One line of the results file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub update: UpdateKind,
}

impl From<&FrameResult> for FrameRecord {
    fn from(r: &FrameResult) -> Self {
        Self {
            frame: r.frame,
            x: r.bbox.x,
            y: r.bbox.y,
            w: r.bbox.w,
            h: r.bbox.h,
            score: r.score,
            update: r.update,
        }
    }
}

impl FrameRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Results of one pass over a sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackRun {
    pub frames: Vec<FrameRecord>,
}

impl TrackRun {
    pub fn boxes(&self) -> Vec<BBox> {
        self.frames.iter().map(FrameRecord::bbox).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.frames {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut frames = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: FrameRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Tracking(format!("results line {}: {e}", i + 1)))?;
            frames.push(r);
        }
        Ok(Self { frames })
    }
}

/// Initialises on the first frame and steps through the rest. Frames are
/// pulled lazily so long sequences need not be held in memory.
pub fn track_sequence(
    frames: impl IntoIterator<Item = Result<RgbImage>>,
    gt0: BBox,
    cfg: &TrackerConfig,
    backbone: Arc<BackboneWeights>,
) -> Result<TrackRun> {
    let mut frames = frames.into_iter();
    let first = frames
        .next()
        .ok_or_else(|| Error::InvalidArgument("sequence has no frames".into()))??;
    let (mut tracker, r1) = Tracker::init(&first, gt0, cfg.clone(), backbone)?;
    drop(first);
    let mut run = TrackRun {
        frames: vec![FrameRecord::from(&r1)],
    };
    for frame in frames {
        let r = tracker.step(&frame?)?;
        run.frames.push(FrameRecord::from(&r));
    }
    Ok(run)
}
