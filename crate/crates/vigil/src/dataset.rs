//! Dataset handling: frame records, the leakage-free video-level split,
//! offline augmentation, in-split shuffling, batch loading, and manifest
//! persistence.
//!
//! The manifest is the unit of persistence between pipeline stages. Frames
//! are never split individually: whole videos are assigned to train/val/test
//! so near-duplicate frames cannot leak across splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const MANIFEST_HEADER: &str = "vigil-manifest v1";
pub const EVENTS_HEADER: &str = "vigil-events v1";

/// Binary frame label. The positive class is `Abandoned` project-wide;
/// class indices are fixed as [background=0, abandoned=1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Background,
    Abandoned,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Background => 0,
            Label::Abandoned => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Background),
            1 => Some(Label::Abandoned),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Abandoned => "abandoned",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "background" => Some(Label::Background),
            "abandoned" => Some(Label::Abandoned),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Offline augmentation variant: {color, gray} x {identity, horizontal flip}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    OrigColor,
    OrigGray,
    FlipColor,
    FlipGray,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::OrigColor,
        Variant::OrigGray,
        Variant::FlipColor,
        Variant::FlipGray,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::OrigColor => "orig-color",
            Variant::OrigGray => "orig-gray",
            Variant::FlipColor => "flip-color",
            Variant::FlipGray => "flip-gray",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "orig-color" => Some(Variant::OrigColor),
            "orig-gray" => Some(Variant::OrigGray),
            "flip-color" => Some(Variant::FlipColor),
            "flip-gray" => Some(Variant::FlipGray),
            _ => None,
        }
    }

    pub fn is_flip(self) -> bool {
        matches!(self, Variant::FlipColor | Variant::FlipGray)
    }

    pub fn is_gray(self) -> bool {
        matches!(self, Variant::OrigGray | Variant::FlipGray)
    }

    /// Apply this variant's transforms to a decoded original frame.
    pub fn apply(self, original: &Image) -> Image {
        let mut img = original.clone();
        if self.is_flip() {
            img = img.flip_horizontal();
        }
        if self.is_gray() {
            img = img.to_gray();
        }
        img
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a record's original (orig-color) pixels live. Variants are applied
/// on decode, so four records can share one stored image.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<Image>),
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ImageRef::Path(a), ImageRef::Path(b)) => a == b,
            (ImageRef::Memory(a), ImageRef::Memory(b)) => a == b,
            _ => false,
        }
    }
}

/// One labeled frame of one video, at one augmentation variant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image_ref: ImageRef,
    pub label: Label,
    pub video_id: String,
    pub frame_index: usize,
    pub variant: Variant,
}

impl FrameRecord {
    pub fn key(&self) -> (&str, usize, Variant) {
        (&self.video_id, self.frame_index, self.variant)
    }

    /// Decode the original pixels, resolving relative paths against
    /// `base_dir` when given.
    pub fn load_original(&self, base_dir: Option<&Path>) -> Result<Image> {
        match &self.image_ref {
            ImageRef::Memory(img) => Ok((**img).clone()),
            ImageRef::Path(p) => {
                let resolved = match base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.clone(),
                };
                Image::load_png(&resolved).map_err(|e| Error::ImageDecode {
                    path: resolved,
                    message: format!(
                        "record {}:{} ({}): {}",
                        self.video_id, self.frame_index, self.variant, e
                    ),
                })
            }
        }
    }

    /// Decode with this record's variant transforms applied.
    pub fn decode(&self, base_dir: Option<&Path>) -> Result<Image> {
        Ok(self.variant.apply(&self.load_original(base_dir)?))
    }
}

/// Train/val/test ratios by video count, plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> SplitSpec {
        SplitSpec {
            ratios: [train, val, test],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| *r <= 0.0 || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must each be > 0, got {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(0.70, 0.15, 0.15, 0)
    }
}

/// Per-event generator metadata, carried alongside generated manifests so
/// error analysis can slice false negatives by the occlusion condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMeta {
    pub video_id: String,
    pub has_bag: bool,
    pub appear_frame: Option<usize>,
    pub near_furniture: bool,
    pub num_persons: usize,
}

/// The authoritative dataset index: records plus the video -> split map.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<FrameRecord>,
    pub assignment: BTreeMap<String, Split>,
    pub events: Option<Vec<EventMeta>>,
    /// Directory relative image refs resolve against; set by `load_manifest`,
    /// not persisted and not part of manifest equality.
    pub base_dir: Option<PathBuf>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
            && self.assignment == other.assignment
            && self.events == other.events
    }
}

impl Manifest {
    /// Build and validate: every record's video assigned, (video_id,
    /// frame_index, variant) unique, assignment keys exactly the videos
    /// present in records. Splits may be empty; operations that need a
    /// split report that themselves.
    pub fn new(
        records: Vec<FrameRecord>,
        assignment: BTreeMap<String, Split>,
    ) -> Result<Manifest> {
        let mut seen = BTreeSet::new();
        for rec in &records {
            if !assignment.contains_key(&rec.video_id) {
                return Err(Error::InvalidArgument(format!(
                    "record video {} has no split assignment",
                    rec.video_id
                )));
            }
            if !seen.insert((rec.video_id.clone(), rec.frame_index, rec.variant)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate record {}:{} variant {}",
                    rec.video_id, rec.frame_index, rec.variant
                )));
            }
        }
        let record_videos: BTreeSet<&String> = records.iter().map(|r| &r.video_id).collect();
        for video in assignment.keys() {
            if !record_videos.contains(video) {
                return Err(Error::InvalidArgument(format!(
                    "assignment lists video {video} with no records"
                )));
            }
        }
        Ok(Manifest {
            records,
            assignment,
            events: None,
            base_dir: None,
        })
    }

    /// Attach generator event metadata. The metadata must cover exactly the
    /// videos present in the manifest.
    pub fn with_events(mut self, events: Vec<EventMeta>) -> Result<Manifest> {
        let meta_videos: BTreeSet<&String> = events.iter().map(|e| &e.video_id).collect();
        if meta_videos.len() != events.len() {
            return Err(Error::InvalidArgument(
                "duplicate video_id in event metadata".into(),
            ));
        }
        let record_videos: BTreeSet<&String> = self.assignment.keys().collect();
        if meta_videos != record_videos {
            return Err(Error::InvalidArgument(
                "event metadata does not cover exactly the manifest's videos".into(),
            ));
        }
        self.events = Some(events);
        Ok(self)
    }

    pub fn split_of(&self, video_id: &str) -> Option<Split> {
        self.assignment.get(video_id).copied()
    }

    /// Records of one split, in manifest order.
    pub fn records_of(&self, split: Split) -> Vec<&FrameRecord> {
        self.records
            .iter()
            .filter(|r| self.assignment.get(&r.video_id) == Some(&split))
            .collect()
    }

    pub fn videos_of(&self, split: Split) -> Vec<&String> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(v, _)| v)
            .collect()
    }

    /// (abandoned, background) record counts per split, for the imbalance
    /// report: the splitter does not balance labels, it only makes the
    /// proportions visible.
    pub fn label_counts(&self, split: Split) -> (usize, usize) {
        let mut abandoned = 0;
        let mut background = 0;
        for rec in self.records_of(split) {
            match rec.label {
                Label::Abandoned => abandoned += 1,
                Label::Background => background += 1,
            }
        }
        (abandoned, background)
    }
}

/// Assign whole videos to train/val/test.
///
/// Videos are shuffled by `spec.seed`, then assigned greedily in the order
/// train, val, test with target counts `round(ratio * num_videos)`. Targets
/// are adjusted so every split gets at least one video and the counts sum to
/// the video count: a deficit is added to train, an excess is removed from
/// val first, then test, then train.
pub fn split_by_video(records: Vec<FrameRecord>, spec: &SplitSpec) -> Result<Manifest> {
    spec.validate()?;
    let mut videos: Vec<String> = records
        .iter()
        .map(|r| r.video_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if videos.len() < 3 {
        return Err(Error::InsufficientVideos(videos.len()));
    }

    let mut shuffle_rng = rng::seeded(spec.seed);
    let order = rng::shuffle_indices(&mut shuffle_rng, videos.len());
    videos = order.into_iter().map(|i| videos[i].clone()).collect();

    let counts = split_counts(spec.ratios, videos.len());

    let mut assignment = BTreeMap::new();
    let mut cursor = 0usize;
    for (split, count) in Split::ALL.iter().zip(counts) {
        for video in &videos[cursor..cursor + count] {
            assignment.insert(video.clone(), *split);
        }
        cursor += count;
    }

    Manifest::new(records, assignment)
}

/// Target video counts per split under the rounding rule above.
fn split_counts(ratios: [f64; 3], num_videos: usize) -> [usize; 3] {
    let n = num_videos as i64;
    let mut t: [i64; 3] = [0; 3];
    for (i, ratio) in ratios.iter().enumerate() {
        t[i] = (ratio * num_videos as f64).round() as i64;
        t[i] = t[i].max(1);
    }
    let deficit = n - t.iter().sum::<i64>();
    if deficit > 0 {
        t[0] += deficit;
    }
    // Excess comes out of val, then test, then train, never below one.
    while t.iter().sum::<i64>() > n {
        let before = t.iter().sum::<i64>();
        for i in [1, 2, 0] {
            if t.iter().sum::<i64>() > n && t[i] > 1 {
                t[i] -= 1;
            }
        }
        assert_ne!(before, t.iter().sum::<i64>(), "split counts cannot settle");
    }
    [t[0] as usize, t[1] as usize, t[2] as usize]
}

/// Materialize the four offline variants for every input record.
///
/// Inputs must all be orig-color; output is exactly 4x the input count with
/// label, video_id and frame_index preserved per variant group.
pub fn augment(records: Vec<FrameRecord>) -> Result<Vec<FrameRecord>> {
    for rec in &records {
        if rec.variant != Variant::OrigColor {
            return Err(Error::DoubleAugmentation {
                video_id: rec.video_id.clone(),
                frame_index: rec.frame_index,
                variant: rec.variant.as_str().into(),
            });
        }
    }
    let mut out = Vec::with_capacity(records.len() * 4);
    for rec in records {
        for variant in Variant::ALL {
            out.push(FrameRecord {
                image_ref: rec.image_ref.clone(),
                label: rec.label,
                video_id: rec.video_id.clone(),
                frame_index: rec.frame_index,
                variant,
            });
        }
    }
    Ok(out)
}

/// Augment a manifest in place: records quadruple, assignments and event
/// metadata are unchanged.
pub fn augment_manifest(manifest: &Manifest) -> Result<Manifest> {
    let augmented = augment(manifest.records.clone())?;
    let mut out = Manifest::new(augmented, manifest.assignment.clone())?;
    out.events = manifest.events.clone();
    out.base_dir = manifest.base_dir.clone();
    Ok(out)
}

/// Permute record order independently within each split. Records stay at
/// positions owned by their split, so assignments and multisets are
/// untouched.
pub fn shuffle_within_split(manifest: &Manifest, seed: u64) -> Manifest {
    let mut out = manifest.clone();
    for (stream, split) in Split::ALL.iter().enumerate() {
        let positions: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| manifest.assignment.get(&r.video_id) == Some(split))
            .map(|(i, _)| i)
            .collect();
        let mut split_rng = rng::RngState::new(seed, stream as u64).to_rng();
        let perm = rng::shuffle_indices(&mut split_rng, positions.len());
        for (slot, src) in perm.into_iter().enumerate() {
            out.records[positions[slot]] = manifest.records[positions[src]].clone();
        }
    }
    out
}

/// One decoded batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Image>,
    pub labels: Vec<Label>,
}

/// Number of batches a split yields: the train split drops its last partial
/// batch, val/test keep it.
pub fn batch_count(record_count: usize, split: Split, batch_size: usize) -> usize {
    match split {
        Split::Train => record_count / batch_size,
        Split::Val | Split::Test => record_count.div_ceil(batch_size),
    }
}

/// Decode one batch of a split. Variant transforms are applied on load.
pub fn load_batch(
    manifest: &Manifest,
    split: Split,
    batch_index: usize,
    batch_size: usize,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let records = manifest.records_of(split);
    let available = batch_count(records.len(), split, batch_size);
    if batch_index >= available {
        return Err(Error::BatchOutOfRange {
            split: split.as_str().into(),
            index: batch_index,
            available,
        });
    }
    let start = batch_index * batch_size;
    let end = (start + batch_size).min(records.len());
    let mut images = Vec::with_capacity(end - start);
    let mut labels = Vec::with_capacity(end - start);
    for rec in &records[start..end] {
        images.push(rec.decode(manifest.base_dir.as_deref())?);
        labels.push(rec.label);
    }
    Ok(Batch { images, labels })
}

fn ref_to_field(image_ref: &ImageRef) -> Result<String> {
    match image_ref {
        ImageRef::Memory(_) => Err(Error::InvalidArgument(
            "in-memory record cannot be persisted; write the corpus to disk first".into(),
        )),
        ImageRef::Path(p) => {
            let s = p
                .to_str()
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("non-UTF-8 image path {}", p.display()))
                })?
                .to_string();
            if s.contains('\t') || s.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "tabs and newlines are forbidden in image paths: {s:?}"
                )));
            }
            Ok(s)
        }
    }
}

/// Write the manifest file, and a `<path>.events` sidecar when event
/// metadata is attached.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(MANIFEST_HEADER);
    text.push('\n');
    for rec in &manifest.records {
        let split = manifest
            .assignment
            .get(&rec.video_id)
            .expect("validated manifest");
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            ref_to_field(&rec.image_ref)?,
            rec.label,
            rec.video_id,
            rec.frame_index,
            rec.variant,
            split
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;

    if let Some(events) = &manifest.events {
        let sidecar = events_sidecar_path(path);
        let mut out = Vec::new();
        writeln!(out, "{EVENTS_HEADER}").unwrap();
        for ev in events {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                ev.video_id,
                u8::from(ev.has_bag),
                ev.appear_frame.map_or("-".to_string(), |f| f.to_string()),
                u8::from(ev.near_furniture),
                ev.num_persons
            )
            .unwrap();
        }
        fs::write(&sidecar, out).map_err(|e| Error::io(sidecar, e))?;
    }
    Ok(())
}

pub fn events_sidecar_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_owned();
    os.push(".events");
    PathBuf::from(os)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::ManifestParse {
        line,
        message: message.into(),
    }
}

/// Read a manifest file (and its events sidecar, when present). The loaded
/// manifest resolves relative image refs against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == MANIFEST_HEADER => {}
        Some((_, first)) => {
            return Err(parse_err(1, format!("expected header {MANIFEST_HEADER:?}, got {first:?}")))
        }
        None => return Err(parse_err(1, format!("empty file; expected header {MANIFEST_HEADER:?}"))),
    }

    let mut records = Vec::new();
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut last_line = 1usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        last_line = line_no;
        if line.is_empty() {
            return Err(parse_err(line_no, "blank line"));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(parse_err(
                line_no,
                format!("expected 6 tab-separated fields, got {}", fields.len()),
            ));
        }
        let label = Label::parse(fields[1])
            .ok_or_else(|| parse_err(line_no, format!("unknown label {:?}", fields[1])))?;
        let frame_index: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad frame_index {:?}", fields[3])))?;
        let variant = Variant::parse(fields[4])
            .ok_or_else(|| parse_err(line_no, format!("unknown variant {:?}", fields[4])))?;
        let split = Split::parse(fields[5]).ok_or_else(|| {
            parse_err(
                line_no,
                format!("video {:?} has no valid split assignment ({:?})", fields[2], fields[5]),
            )
        })?;
        let video_id = fields[2].to_string();
        match assignment.get(&video_id) {
            Some(prev) if *prev != split => {
                return Err(parse_err(
                    line_no,
                    format!("video {video_id} assigned to both {prev} and {split}"),
                ));
            }
            _ => {
                assignment.insert(video_id.clone(), split);
            }
        }
        if !seen.insert((video_id.clone(), frame_index, variant)) {
            return Err(parse_err(
                line_no,
                format!("duplicate record {video_id}:{frame_index} variant {variant}"),
            ));
        }
        records.push(FrameRecord {
            image_ref: ImageRef::Path(PathBuf::from(fields[0])),
            label,
            video_id,
            frame_index,
            variant,
        });
    }

    let mut manifest = Manifest::new(records, assignment)
        .map_err(|e| parse_err(last_line, e.to_string()))?;

    let sidecar = events_sidecar_path(path);
    if sidecar.exists() {
        let events = load_events(&sidecar)?;
        manifest = manifest
            .with_events(events)
            .map_err(|e| parse_err(last_line, e.to_string()))?;
    }
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    Ok(manifest)
}

fn load_events(path: &Path) -> Result<Vec<EventMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == EVENTS_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header {EVENTS_HEADER:?}"))),
    }
    let mut events = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                line_no,
                format!("expected 5 tab-separated event fields, got {}", fields.len()),
            ));
        }
        let has_bag = fields[1] == "1";
        let appear_frame = if fields[2] == "-" {
            None
        } else {
            Some(fields[2].parse().map_err(|_| {
                parse_err(line_no, format!("bad appear_frame {:?}", fields[2]))
            })?)
        };
        events.push(EventMeta {
            video_id: fields[0].to_string(),
            has_bag,
            appear_frame,
            near_furniture: fields[3] == "1",
            num_persons: fields[4]
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad num_persons {:?}", fields[4])))?,
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_image(tag: f64) -> ImageRef {
        ImageRef::Memory(Arc::new(Image::from_fn(4, 4, |y, x| {
            [tag, (y as f64) / 4.0, (x as f64) / 4.0]
        })))
    }

    pub(crate) fn record(video: &str, frame: usize) -> FrameRecord {
        FrameRecord {
            image_ref: mem_image(frame as f64 / 100.0),
            label: if frame.is_multiple_of(2) {
                Label::Background
            } else {
                Label::Abandoned
            },
            video_id: video.to_string(),
            frame_index: frame,
            variant: Variant::OrigColor,
        }
    }

    fn records_for_videos(videos: &[&str], frames: usize) -> Vec<FrameRecord> {
        let mut out = Vec::new();
        for v in videos {
            for f in 0..frames {
                out.push(record(v, f));
            }
        }
        out
    }

    #[test]
    fn ten_videos_default_ratios_split_7_1_2() {
        // round(0.7*10)=7, round(1.5)=2, round(1.5)=2 sums to 11; the excess
        // comes out of val first, giving 7/1/2.
        let videos: Vec<String> = (0..10).map(|i| format!("v{i:02}")).collect();
        let refs: Vec<&str> = videos.iter().map(String::as_str).collect();
        let manifest = split_by_video(
            records_for_videos(&refs, 2),
            &SplitSpec::new(0.7, 0.15, 0.15, 11),
        )
        .unwrap();
        assert_eq!(manifest.videos_of(Split::Train).len(), 7);
        assert_eq!(manifest.videos_of(Split::Val).len(), 1);
        assert_eq!(manifest.videos_of(Split::Test).len(), 2);
    }

    #[test]
    fn three_videos_split_1_1_1() {
        let manifest = split_by_video(
            records_for_videos(&["a", "b", "c"], 2),
            &SplitSpec::new(0.7, 0.15, 0.15, 0),
        )
        .unwrap();
        for split in Split::ALL {
            assert_eq!(manifest.videos_of(split).len(), 1);
        }
    }

    #[test]
    fn records_of_one_video_share_a_split() {
        let manifest = split_by_video(
            records_for_videos(&["a", "b", "c", "d"], 5),
            &SplitSpec::default(),
        )
        .unwrap();
        for video in ["a", "b", "c", "d"] {
            let splits: BTreeSet<_> = manifest
                .records
                .iter()
                .filter(|r| r.video_id == video)
                .map(|r| manifest.split_of(&r.video_id).unwrap())
                .collect();
            assert_eq!(splits.len(), 1, "video {video} spans splits");
        }
    }

    #[test]
    fn fewer_than_three_videos_is_an_error() {
        let err = split_by_video(records_for_videos(&["a", "b"], 3), &SplitSpec::default())
            .unwrap_err();
        assert!(matches!(err, Error::InsufficientVideos(2)));
    }

    #[test]
    fn augment_quadruples_and_preserves_fields() {
        let records = records_for_videos(&["a"], 100);
        let out = augment(records.clone()).unwrap();
        assert_eq!(out.len(), 400);
        for (i, group) in out.chunks(4).enumerate() {
            let variants: Vec<Variant> = group.iter().map(|r| r.variant).collect();
            assert_eq!(variants, Variant::ALL);
            for rec in group {
                assert_eq!(rec.label, records[i].label);
                assert_eq!(rec.video_id, records[i].video_id);
                assert_eq!(rec.frame_index, records[i].frame_index);
            }
        }
    }

    #[test]
    fn augment_rejects_non_orig_color_input() {
        let mut records = records_for_videos(&["a"], 2);
        records[1].variant = Variant::FlipGray;
        assert!(matches!(
            augment(records).unwrap_err(),
            Error::DoubleAugmentation { .. }
        ));
    }

    #[test]
    fn shuffle_is_seeded_permutation_that_respects_splits() {
        let manifest = split_by_video(
            records_for_videos(&["a", "b", "c", "d", "e"], 6),
            &SplitSpec::default(),
        )
        .unwrap();
        let s1 = shuffle_within_split(&manifest, 7);
        let s2 = shuffle_within_split(&manifest, 7);
        assert_eq!(s1, s2);
        assert_eq!(s1.assignment, manifest.assignment);

        let mut before: Vec<_> = manifest.records.iter().map(|r| r.key()).collect();
        let mut after: Vec<_> = s1.records.iter().map(|r| r.key()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);

        for (i, rec) in s1.records.iter().enumerate() {
            assert_eq!(
                manifest.assignment.get(&rec.video_id),
                manifest.assignment.get(&manifest.records[i].video_id),
                "position {i} changed split"
            );
        }
    }

    fn manifest_with_train_records(n: usize) -> Manifest {
        // n train records on one video plus one val and one test video.
        let mut records = Vec::new();
        for f in 0..n {
            records.push(record("tr", f));
        }
        records.push(record("va", 0));
        records.push(record("te", 0));
        let mut assignment = BTreeMap::new();
        assignment.insert("tr".into(), Split::Train);
        assignment.insert("va".into(), Split::Val);
        assignment.insert("te".into(), Split::Test);
        Manifest::new(records, assignment).unwrap()
    }

    #[test]
    fn train_batches_drop_last_partial() {
        let manifest = manifest_with_train_records(250);
        assert_eq!(batch_count(250, Split::Train, 100), 2);
        let b0 = load_batch(&manifest, Split::Train, 0, 100).unwrap();
        let b1 = load_batch(&manifest, Split::Train, 1, 100).unwrap();
        assert_eq!(b0.labels.len(), 100);
        assert_eq!(b1.labels.len(), 100);
        assert!(matches!(
            load_batch(&manifest, Split::Train, 2, 100).unwrap_err(),
            Error::BatchOutOfRange { .. }
        ));
    }

    #[test]
    fn eval_batches_keep_last_partial() {
        // 250 test records via 250 frames on the test video is not possible
        // with unique keys on one video; use frames 0..250 directly.
        let mut records = Vec::new();
        for f in 0..250 {
            records.push(record("te", f));
        }
        records.push(record("tr", 0));
        records.push(record("va", 0));
        let mut assignment = BTreeMap::new();
        assignment.insert("te".into(), Split::Test);
        assignment.insert("tr".into(), Split::Train);
        assignment.insert("va".into(), Split::Val);
        let manifest = Manifest::new(records, assignment).unwrap();
        assert_eq!(batch_count(250, Split::Test, 100), 3);
        let sizes: Vec<usize> = (0..3)
            .map(|i| load_batch(&manifest, Split::Test, i, 100).unwrap().labels.len())
            .collect();
        assert_eq!(sizes, vec![100, 100, 50]);
    }

    #[test]
    fn batch_labels_match_batch_size() {
        let manifest = manifest_with_train_records(100);
        let batch = load_batch(&manifest, Split::Train, 0, 100).unwrap();
        assert_eq!(batch.labels.len(), 100);
        assert_eq!(batch.images.len(), 100);
    }

    #[test]
    fn gray_variant_batches_have_equal_channels() {
        let mut manifest = manifest_with_train_records(2);
        manifest.records[0].variant = Variant::OrigGray;
        let batch = load_batch(&manifest, Split::Train, 0, 1).unwrap();
        let img = &batch.images[0];
        for y in 0..img.height() {
            for x in 0..img.width() {
                let [r, g, b] = img.get(y, x);
                assert_eq!(r, g);
                assert_eq!(g, b);
            }
        }
    }

    fn path_manifest(dir: &Path) -> Manifest {
        let mut records = Vec::new();
        for (v, split_frames) in [("a", 4), ("b", 3), ("c", 3)] {
            for f in 0..split_frames {
                let img = Image::from_fn(4, 4, |y, x| {
                    [f as f64 / 10.0, y as f64 / 4.0, x as f64 / 4.0]
                });
                let file = dir.join(format!("{v}_{f:06}.png"));
                img.save_png(&file).unwrap();
                records.push(FrameRecord {
                    image_ref: ImageRef::Path(PathBuf::from(file.file_name().unwrap())),
                    label: if f % 2 == 0 { Label::Background } else { Label::Abandoned },
                    video_id: v.into(),
                    frame_index: f,
                    variant: Variant::OrigColor,
                });
            }
        }
        let mut assignment = BTreeMap::new();
        assignment.insert("a".into(), Split::Train);
        assignment.insert("b".into(), Split::Val);
        assignment.insert("c".into(), Split::Test);
        Manifest::new(records, assignment).unwrap()
    }

    #[test]
    fn manifest_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = path_manifest(dir.path())
            .with_events(vec![
                EventMeta {
                    video_id: "a".into(),
                    has_bag: true,
                    appear_frame: Some(1),
                    near_furniture: false,
                    num_persons: 2,
                },
                EventMeta {
                    video_id: "b".into(),
                    has_bag: false,
                    appear_frame: None,
                    near_furniture: false,
                    num_persons: 2,
                },
                EventMeta {
                    video_id: "c".into(),
                    has_bag: true,
                    appear_frame: Some(2),
                    near_furniture: true,
                    num_persons: 1,
                },
            ])
            .unwrap();
        let path = dir.path().join("m.tsv");
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, manifest);
        // loaded manifests resolve relative refs against their directory
        assert!(load_batch(&loaded, Split::Train, 0, 4).is_ok());
    }

    #[test]
    fn manifest_rejects_bad_split_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(
            &path,
            format!("{MANIFEST_HEADER}\nx.png\tabandoned\tv1\t0\torig-color\t\n"),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            Error::ManifestParse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("no valid split"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_manifest_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "").unwrap();
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            Error::ManifestParse { line: 1, .. }
        ));
    }

    #[test]
    fn manifest_with_an_empty_split_still_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(
            &path,
            format!(
                "{MANIFEST_HEADER}\nx.png\tabandoned\tv1\t0\torig-color\ttrain\ny.png\tbackground\tv2\t0\torig-color\tval\n"
            ),
        )
        .unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.records.len(), 2);
        assert!(manifest.records_of(Split::Test).is_empty());
    }

    #[test]
    fn leakage_across_lines_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(
            &path,
            format!(
                "{MANIFEST_HEADER}\nx.png\tabandoned\tv1\t0\torig-color\ttrain\nx2.png\tabandoned\tv1\t1\torig-color\tval\n"
            ),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("assigned to both"), "{err}");
    }

    #[test]
    fn in_memory_records_cannot_be_persisted() {
        let manifest = manifest_with_train_records(2);
        let dir = tempfile::tempdir().unwrap();
        let err = save_manifest(&manifest, &dir.path().join("m.tsv")).unwrap_err();
        assert!(err.to_string().contains("in-memory"), "{err}");
    }
}
