//! One-pass evaluation on OTB-layout sequences: loading, precision and
//! success curves, summary scores and per-attribute tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::sampling::{iou, BBox};
use crate::tracker::{track_sequence, TrackRun, TrackerConfig};

/// The eleven OTB challenge tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum Attribute {
    IV,
    SV,
    OCC,
    DEF,
    MB,
    FM,
    IPR,
    OPR,
    OV,
    BC,
    LR,
}

impl Attribute {
    pub const ALL: [Attribute; 11] = [
        Attribute::IV,
        Attribute::SV,
        Attribute::OCC,
        Attribute::DEF,
        Attribute::MB,
        Attribute::FM,
        Attribute::IPR,
        Attribute::OPR,
        Attribute::OV,
        Attribute::BC,
        Attribute::LR,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Attribute::IV => "IV",
            Attribute::SV => "SV",
            Attribute::OCC => "OCC",
            Attribute::DEF => "DEF",
            Attribute::MB => "MB",
            Attribute::FM => "FM",
            Attribute::IPR => "IPR",
            Attribute::OPR => "OPR",
            Attribute::OV => "OV",
            Attribute::BC => "BC",
            Attribute::LR => "LR",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Attribute::ALL
            .into_iter()
            .find(|a| a.code() == up)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute {s:?}")))
    }
}

/// An OTB-layout sequence on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// 0-based pixel boxes, one per frame.
    pub gt: Vec<BBox>,
    pub attributes: Vec<Attribute>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "jpeg", "png", "ppm", "pnm"];
pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";

impl SequenceRecord {
    pub fn load_frame(&self, i: usize) -> Result<RgbImage> {
        let path = self
            .frames
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {i} out of range")))?;
        let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
        Ok(img.to_rgb8())
    }

    /// Lazily decoded frames in order.
    pub fn frame_iter(&self) -> impl Iterator<Item = Result<RgbImage>> + '_ {
        (0..self.frames.len()).map(|i| self.load_frame(i))
    }
}

/// Parses `x,y,w,h` lines (comma, tab or whitespace separated) in 1-based
/// OTB coordinates into 0-based boxes.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        let [x, y, w, h] = nums[..] else {
            return Err(Error::data(
                path,
                format!("line {}: expected 4 values, got {}", i + 1, nums.len()),
            ));
        };
        let b = BBox::new(x - 1.0, y - 1.0, w, h);
        if !b.is_valid() {
            return Err(Error::data(path, format!("line {}: degenerate box", i + 1)));
        }
        out.push(b);
    }
    if out.is_empty() {
        return Err(Error::data(path, "no ground-truth boxes"));
    }
    Ok(out)
}

fn parse_attributes(text: &str, path: &Path) -> Result<Vec<Attribute>> {
    let mut tags: Vec<Attribute> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::data(path, format!("unknown attribute {s:?}")))
        })
        .collect::<Result<_>>()?;
    tags.sort();
    tags.dedup();
    Ok(tags)
}

/// Reads `img/` frames (sorted by file name), the ground truth and the
/// optional attribute list.
pub fn load_otb_sequence(dir: &Path) -> Result<SequenceRecord> {
    let img_dir = dir.join("img");
    let entries = std::fs::read_dir(&img_dir).map_err(|e| Error::data(&img_dir, e.to_string()))?;
    let mut frames = Vec::new();
    for e in entries {
        let p = e?.path();
        let ext = p
            .extension()
            .and_then(|s| s.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.as_str())) {
            frames.push(p);
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(Error::data(&img_dir, "no image frames"));
    }
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text =
        std::fs::read_to_string(&gt_path).map_err(|e| Error::data(&gt_path, e.to_string()))?;
    let gt = parse_groundtruth(&text, &gt_path)?;
    if gt.len() != frames.len() {
        return Err(Error::data(
            &gt_path,
            format!("{} boxes for {} frames", gt.len(), frames.len()),
        ));
    }
    let attr_path = dir.join(ATTRIBUTES_FILE);
    let attributes = match std::fs::read_to_string(&attr_path) {
        Ok(t) => parse_attributes(&t, &attr_path)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::data(&attr_path, e.to_string())),
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(SequenceRecord {
        name,
        frames,
        gt,
        attributes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl CurvePoints {
    /// `threshold,value` per line, with a header.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "threshold,value")?;
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            writeln!(out, "{t},{v}")?;
        }
        Ok(())
    }
}

fn check_lengths(run: &[BBox], gt: &[BBox]) -> Result<()> {
    if run.len() != gt.len() || run.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "run has {} boxes, ground truth {}",
            run.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Fraction of frames with centre error ≤ t for t = 0, 1, …, 50 pixels.
pub fn precision_curve(run: &[BBox], gt: &[BBox]) -> Result<CurvePoints> {
    check_lengths(run, gt)?;
    let errs: Vec<f64> = run
        .iter()
        .zip(gt)
        .map(|(a, b)| center_error(a, b))
        .collect();
    let thresholds: Vec<f64> = (0..=50).map(f64::from).collect();
    let values = thresholds
        .iter()
        .map(|&t| errs.iter().filter(|&&e| e <= t).count() as f64 / errs.len() as f64)
        .collect();
    Ok(CurvePoints { thresholds, values })
}

/// Value of the curve at `threshold`, which must be one of its points.
pub fn dp_at(curve: &CurvePoints, threshold: f64) -> Result<f64> {
    curve
        .thresholds
        .iter()
        .position(|&t| t == threshold)
        .map(|i| curve.values[i])
        .ok_or_else(|| Error::InvalidArgument(format!("threshold {threshold} not on the curve")))
}

/// Fraction of frames with IoU strictly above t for t = 0, 0.05, …, 1.
pub fn success_curve(run: &[BBox], gt: &[BBox]) -> Result<CurvePoints> {
    check_lengths(run, gt)?;
    let ious: Vec<f64> = run.iter().zip(gt).map(|(a, b)| iou(a, b)).collect();
    let thresholds: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let values = thresholds
        .iter()
        .map(|&t| ious.iter().filter(|&&o| o > t).count() as f64 / ious.len() as f64)
        .collect();
    Ok(CurvePoints { thresholds, values })
}

/// Mean of the curve's values.
pub fn auc(curve: &CurvePoints) -> f64 {
    curve.values.iter().sum::<f64>() / curve.values.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub frames: usize,
    pub dp20: f64,
    pub auc: f64,
    pub mean_iou: f64,
}

pub fn score_run(run: &[BBox], gt: &[BBox]) -> Result<Scores> {
    let p = precision_curve(run, gt)?;
    let s = success_curve(run, gt)?;
    let mean_iou = run.iter().zip(gt).map(|(a, b)| iou(a, b)).sum::<f64>() / run.len() as f64;
    Ok(Scores {
        frames: run.len(),
        dp20: dp_at(&p, 20.0)?,
        auc: auc(&s),
        mean_iou,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub sequences: usize,
    pub dp20: f64,
    pub auc: f64,
}

/// Mean DP@20 and AUC per attribute over the sequences carrying it.
/// Attributes no sequence carries are omitted.
pub fn attribute_report(
    scores: &BTreeMap<String, Scores>,
    records: &[SequenceRecord],
) -> Result<BTreeMap<Attribute, AttributeRow>> {
    let mut acc: BTreeMap<Attribute, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let s = scores
            .get(&r.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no run for sequence {}", r.name)))?;
        for &a in &r.attributes {
            let e = acc.entry(a).or_default();
            e.0 += 1;
            e.1 += s.dp20;
            e.2 += s.auc;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(a, (n, dp, au))| {
            (
                a,
                AttributeRow {
                    sequences: n,
                    dp20: dp / n as f64,
                    auc: au / n as f64,
                },
            )
        })
        .collect())
}

/// Initialises on frame 1's ground truth, tracks once without restarts
/// and scores the result.
pub fn ope_run(
    cfg: &TrackerConfig,
    record: &SequenceRecord,
    backbone: Arc<BackboneWeights>,
) -> Result<(TrackRun, Scores)> {
    let run = track_sequence(record.frame_iter(), record.gt[0], cfg, backbone)?;
    let scores = score_run(&run.boxes(), &record.gt)?;
    Ok((run, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("gt.txt")
    }

    #[test]
    fn groundtruth_parsing() {
        let a = parse_groundtruth("10,20,30,40\n", &p()).unwrap();
        assert_eq!(a, vec![BBox::new(9.0, 19.0, 30.0, 40.0)]);
        assert_eq!(parse_groundtruth("10\t20\t30\t40", &p()).unwrap(), a);
        assert_eq!(parse_groundtruth("10 20  30 40\n\n", &p()).unwrap(), a);
        let err = parse_groundtruth("", &p()).unwrap_err().to_string();
        assert!(err.contains("gt.txt"), "{err}");
        let err = parse_groundtruth("1,2,3,4\n1,2,x,4", &p())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn precision_steps() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 4];
        let off: Vec<BBox> = gt.iter().map(|b| b.translated(25.0, 0.0)).collect();
        let c = precision_curve(&off, &gt).unwrap();
        assert_eq!(c.thresholds.len(), 51);
        assert_eq!(dp_at(&c, 20.0).unwrap(), 0.0);
        assert_eq!(dp_at(&c, 25.0).unwrap(), 1.0);
        let half = vec![
            gt[0],
            gt[0],
            gt[0].translated(100.0, 0.0),
            gt[0].translated(0.0, 100.0),
        ];
        assert_eq!(
            dp_at(&precision_curve(&half, &gt).unwrap(), 20.0).unwrap(),
            0.5
        );
        assert!(precision_curve(&half[..3], &gt).is_err());
    }

    #[test]
    fn success_conventions() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 3];
        let s = success_curve(&gt, &gt).unwrap();
        assert_eq!(s.values.len(), 21);
        assert_eq!(s.values[20], 0.0);
        assert_eq!(auc(&s), 20.0 / 21.0);
        let far: Vec<BBox> = gt.iter().map(|b| b.translated(50.0, 0.0)).collect();
        assert_eq!(auc(&success_curve(&far, &gt).unwrap()), 0.0);
        // IoU exactly 1/2: 20×10 box containing the 10×10 gt
        let half: Vec<BBox> = gt.iter().map(|b| BBox::new(b.x, b.y, 20.0, 10.0)).collect();
        assert_eq!(auc(&success_curve(&half, &gt).unwrap()), 10.0 / 21.0);
    }

    #[test]
    fn attribute_rows() {
        let rec = |name: &str, attrs: Vec<Attribute>| SequenceRecord {
            name: name.into(),
            frames: vec![],
            gt: vec![],
            attributes: attrs,
        };
        let recs = vec![
            rec("a", vec![Attribute::OCC, Attribute::SV]),
            rec("b", vec![Attribute::OCC]),
            rec("c", vec![]),
        ];
        let mut scores = BTreeMap::new();
        for (n, v) in [("a", 1.0), ("b", 0.5), ("c", 0.0)] {
            scores.insert(
                n.to_string(),
                Scores {
                    frames: 1,
                    dp20: v,
                    auc: v / 2.0,
                    mean_iou: v,
                },
            );
        }
        let rep = attribute_report(&scores, &recs).unwrap();
        assert_eq!(rep.len(), 2);
        assert_eq!(rep[&Attribute::SV].dp20, 1.0);
        assert_eq!(rep[&Attribute::OCC].sequences, 2);
        assert_eq!(rep[&Attribute::OCC].auc, 0.375);
        scores.remove("b");
        assert!(attribute_report(&scores, &recs).is_err());
    }

    #[test]
    fn attribute_codes() {
        for a in Attribute::ALL {
            assert_eq!(a.code().parse::<Attribute>().unwrap(), a);
        }
        assert_eq!("occ".parse::<Attribute>().unwrap(), Attribute::OCC);
        assert!("XYZ".parse::<Attribute>().is_err());
    }
}
