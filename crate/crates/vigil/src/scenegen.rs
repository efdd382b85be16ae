//! Deterministic synthetic scene generator, plus ingestion of real frame
//! directories.
//!
//! Scenes are flat-shaded rooms: a low-contrast background with static
//! furniture props, rectangular persons on seed-derived random walks, and an
//! optional bag sprite that appears mid-event and then stays put. A frame is
//! labeled abandoned exactly when the bag is composited into it. Everything
//! is a pure function of the specs and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::dataset::{EventMeta, FrameRecord, ImageRef, Label, Variant};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, mix_seed, seeded};

pub const MIN_DIMENSION: usize = 32;
pub const BAG_WIDTH: usize = 16;
pub const BAG_HEIGHT: usize = 24;
pub const DEFAULT_FRAMES_PER_EVENT: usize = 30;
pub const DEFAULT_PERSONS_PER_EVENT: usize = 2;
/// Max per-axis person displacement per frame, in pixels.
pub const MAX_WALK_STEP: i64 = 3;

/// Background pixels are clamped below this so the bag's warm bright color
/// family stays the unique high-intensity signal, in gray variants too.
const BACKGROUND_CEILING: f64 = 0.60;
/// Person luma is scaled down to this ceiling for the same reason.
const PERSON_LUMA_CEILING: f64 = 0.45;

const FURNITURE_SALT: u64 = 0x6675_726e;
const PLACEMENT_SALT: u64 = 0x706c_6163;

/// A static capture environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    pub furniture_count: usize,
}

impl SceneSpec {
    pub fn new(
        scene_id: impl Into<String>,
        width: usize,
        height: usize,
        background_seed: u64,
        furniture_count: usize,
    ) -> SceneSpec {
        SceneSpec {
            scene_id: scene_id.into(),
            width,
            height,
            background_seed,
            furniture_count,
        }
    }

    /// Default desk-scale scene: 64x64 with two furniture props.
    pub fn desk(scene_id: impl Into<String>, background_seed: u64) -> SceneSpec {
        SceneSpec::new(scene_id, 64, 64, background_seed, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_DIMENSION || self.height < MIN_DIMENSION {
            return Err(Error::InvalidSpec(format!(
                "scene {} is {}x{}; minimum dimension is {MIN_DIMENSION}",
                self.scene_id, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Bag sprite placement within an event. (x, y) is the sprite's top-left
/// corner; the sprite must lie fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagSpec {
    pub appear_frame: usize,
    pub x: usize,
    pub y: usize,
    pub near_furniture: bool,
}

/// One event (= one video) within a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub event_id: String,
    pub scene: SceneSpec,
    pub num_frames: usize,
    pub num_persons: usize,
    pub bag: Option<BagSpec>,
    pub motion_seed: u64,
}

/// One rendered, labeled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFrame {
    pub image: Image,
    pub label: Label,
    pub video_id: String,
    pub frame_index: usize,
}

/// Axis-aligned sprite box; `top`/`left` inclusive, extents in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    /// True when `self` intersects `other` grown by `dilation` pixels on
    /// every side (touching counts as intersecting the dilated box).
    pub fn intersects_dilated(&self, other: &Rect, dilation: usize) -> bool {
        let d = dilation as i64;
        let (at, ab) = (self.top as i64, self.bottom() as i64);
        let (al, ar) = (self.left as i64, self.right() as i64);
        let (bt, bb) = (other.top as i64 - d, other.bottom() as i64 + d);
        let (bl, br) = (other.left as i64 - d, other.right() as i64 + d);
        al < br && bl < ar && at < bb && bt < ab
    }
}

fn bag_rect(bag: &BagSpec) -> Rect {
    Rect {
        top: bag.y,
        left: bag.x,
        height: BAG_HEIGHT,
        width: BAG_WIDTH,
    }
}

/// Furniture prop geometry for a scene. Pure function of the spec, shared by
/// the renderer, bag placement, and the occlusion checks.
pub fn furniture_boxes(spec: &SceneSpec) -> Vec<Rect> {
    let mut r = seeded(mix_seed(spec.background_seed ^ FURNITURE_SALT, &spec.scene_id));
    let mut boxes = Vec::with_capacity(spec.furniture_count);
    for _ in 0..spec.furniture_count {
        let width = rng::uniform_int(&mut r, 8, 14) as usize;
        let height = rng::uniform_int(&mut r, 6, 12) as usize;
        // Keep props in the lower two thirds, like floor furniture.
        let min_top = spec.height / 3;
        let top = rng::uniform_int(&mut r, min_top as i64, (spec.height - height) as i64) as usize;
        let left = rng::uniform_int(&mut r, 0, (spec.width - width) as i64) as usize;
        boxes.push(Rect {
            top,
            left,
            height,
            width,
        });
    }
    boxes
}

/// Render the static background: base color with a soft gradient, dim wall
/// patches, per-pixel noise, and the furniture props.
pub fn render_background(spec: &SceneSpec) -> Result<Image> {
    spec.validate()?;
    let mut r = seeded(mix_seed(spec.background_seed, &spec.scene_id));

    let base_luma = rng::uniform(&mut r, 0.36, 0.44);
    let base: [f64; 3] = [
        base_luma + rng::uniform(&mut r, -0.015, 0.015),
        base_luma + rng::uniform(&mut r, -0.015, 0.015),
        base_luma + rng::uniform(&mut r, -0.015, 0.015),
    ];
    let horizontal = rng::uniform(&mut r, 0.0, 1.0) < 0.5;
    let amplitude = rng::uniform(&mut r, 0.04, 0.10)
        * if rng::uniform(&mut r, 0.0, 1.0) < 0.5 { 1.0 } else { -1.0 };

    let mut img = Image::from_fn(spec.height, spec.width, |y, x| {
        let t = if horizontal {
            x as f64 / (spec.width - 1) as f64
        } else {
            y as f64 / (spec.height - 1) as f64
        };
        let delta = amplitude * (2.0 * t - 1.0);
        [base[0] + delta, base[1] + delta, base[2] + delta]
    });

    // Dim wall patches break up the gradient.
    for _ in 0..3 {
        let w = rng::uniform_int(&mut r, 6, 18) as usize;
        let h = rng::uniform_int(&mut r, 4, 12) as usize;
        let top = rng::uniform_int(&mut r, 0, (spec.height - h) as i64) as usize;
        let left = rng::uniform_int(&mut r, 0, (spec.width - w) as i64) as usize;
        let delta = rng::uniform(&mut r, -0.08, 0.08);
        for y in top..top + h {
            for x in left..left + w {
                let [pr, pg, pb] = img.get(y, x);
                img.set(y, x, [pr + delta, pg + delta, pb + delta]);
            }
        }
    }

    // Per-pixel sensor noise, then clamp below the bag's intensity band.
    for y in 0..spec.height {
        for x in 0..spec.width {
            let noise = rng::uniform(&mut r, -0.02, 0.02);
            let px = img.get(y, x);
            img.set(
                y,
                x,
                [
                    (px[0] + noise).clamp(0.05, BACKGROUND_CEILING),
                    (px[1] + noise).clamp(0.05, BACKGROUND_CEILING),
                    (px[2] + noise).clamp(0.05, BACKGROUND_CEILING),
                ],
            );
        }
    }

    for rect in furniture_boxes(spec) {
        let v = rng::uniform(&mut r, 0.34, 0.46);
        let tint = rng::uniform(&mut r, -0.02, 0.02);
        img.fill_rect(
            rect.top,
            rect.left,
            rect.height,
            rect.width,
            [(v + tint).clamp(0.0, 0.6), v, (v - tint).clamp(0.0, 0.6)],
        );
    }
    Ok(img)
}

struct PersonSprite {
    top: i64,
    left: i64,
    height: i64,
    width: i64,
    color: [f64; 3],
}

fn sample_person(r: &mut rand_chacha::ChaCha8Rng, scene: &SceneSpec) -> PersonSprite {
    let width = rng::uniform_int(r, 17, 19);
    let height = rng::uniform_int(r, 26, 30);
    let base = rng::uniform(r, 0.37, 0.43);
    let mut color = [
        base + rng::uniform(r, -0.02, 0.02),
        base + rng::uniform(r, -0.02, 0.02),
        base + rng::uniform(r, -0.02, 0.02),
    ];
    let luma = crate::image::LUMA_WEIGHTS[0] * color[0]
        + crate::image::LUMA_WEIGHTS[1] * color[1]
        + crate::image::LUMA_WEIGHTS[2] * color[2];
    if luma > PERSON_LUMA_CEILING {
        let scale = PERSON_LUMA_CEILING / luma;
        for c in &mut color {
            *c *= scale;
        }
    }
    let top = rng::uniform_int(r, 0, scene.height as i64 - height);
    let left = rng::uniform_int(r, 0, scene.width as i64 - width);
    PersonSprite {
        top,
        left,
        height,
        width,
        color,
    }
}

/// Bag colors: a bright warm family distinct from background, furniture and
/// persons by construction, so the class signal survives grayscale.
fn sample_bag_color(r: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    [
        rng::uniform(r, 0.96, 1.00),
        rng::uniform(r, 0.93, 0.97),
        rng::uniform(r, 0.88, 0.93),
    ]
}

fn validate_event(event: &EventSpec) -> Result<()> {
    event.scene.validate()?;
    if event.num_frames == 0 {
        return Err(Error::InvalidSpec(format!(
            "event {} has no frames",
            event.event_id
        )));
    }
    if let Some(bag) = &event.bag {
        if bag.appear_frame >= event.num_frames {
            return Err(Error::InvalidSpec(format!(
                "event {}: appear_frame {} not below num_frames {}",
                event.event_id, bag.appear_frame, event.num_frames
            )));
        }
        if bag.x + BAG_WIDTH > event.scene.width || bag.y + BAG_HEIGHT > event.scene.height {
            return Err(Error::InvalidSpec(format!(
                "event {}: bag at ({}, {}) leaves the {}x{} image",
                event.event_id, bag.x, bag.y, event.scene.width, event.scene.height
            )));
        }
        if bag.near_furniture {
            let rect = bag_rect(bag);
            let touches = furniture_boxes(&event.scene)
                .iter()
                .any(|f| rect.intersects_dilated(f, 2));
            if !touches {
                return Err(Error::InvalidSpec(format!(
                    "event {}: bag marked near_furniture but placed away from all furniture",
                    event.event_id
                )));
            }
        }
    }
    Ok(())
}

/// Render an event: persons walk over the static background; the bag (when
/// present) appears at `appear_frame` and stays put. The bag is drawn last,
/// in the foreground, so a passing person never hides the frame's label.
pub fn generate_event(event: &EventSpec) -> Result<Vec<GeneratedFrame>> {
    validate_event(event)?;
    let background = render_background(&event.scene)?;
    let mut r = seeded(mix_seed(event.motion_seed, &event.event_id));

    let bag_color = event.bag.as_ref().map(|_| sample_bag_color(&mut r));
    let mut persons: Vec<PersonSprite> = (0..event.num_persons)
        .map(|_| sample_person(&mut r, &event.scene))
        .collect();

    let mut frames = Vec::with_capacity(event.num_frames);
    for frame_index in 0..event.num_frames {
        let mut img = background.clone();
        for p in &persons {
            img.fill_rect(p.top as usize, p.left as usize, p.height as usize, p.width as usize, p.color);
        }
        let bag_visible = event
            .bag
            .as_ref()
            .is_some_and(|bag| frame_index >= bag.appear_frame);
        if bag_visible {
            let bag = event.bag.as_ref().unwrap();
            img.fill_rect(bag.y, bag.x, BAG_HEIGHT, BAG_WIDTH, bag_color.unwrap());
        }
        frames.push(GeneratedFrame {
            image: img,
            label: if bag_visible {
                Label::Abandoned
            } else {
                Label::Background
            },
            video_id: event.event_id.clone(),
            frame_index,
        });
        for p in &mut persons {
            let dx = rng::uniform_int(&mut r, -MAX_WALK_STEP, MAX_WALK_STEP);
            let dy = rng::uniform_int(&mut r, -MAX_WALK_STEP, MAX_WALK_STEP);
            p.left = (p.left + dx).clamp(0, event.scene.width as i64 - p.width);
            p.top = (p.top + dy).clamp(0, event.scene.height as i64 - p.height);
        }
    }
    Ok(frames)
}

/// A generated corpus: the frames plus per-event metadata for downstream
/// error analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub frames: Vec<GeneratedFrame>,
    pub events: Vec<EventMeta>,
}

/// Place the bag adjacent to a randomly chosen furniture prop. Clamping into
/// the image can only push the bag further onto the prop, so adjacency holds.
fn place_near(r: &mut rand_chacha::ChaCha8Rng, scene: &SceneSpec, boxes: &[Rect]) -> (usize, usize) {
    let f = &boxes[rng::uniform_int(r, 0, boxes.len() as i64 - 1) as usize];
    let (x, y): (i64, i64) = match rng::uniform_int(r, 0, 3) {
        0 => (f.right() as i64, f.top as i64),
        1 => (f.left as i64 - BAG_WIDTH as i64, f.top as i64),
        2 => (f.left as i64, f.top as i64 - BAG_HEIGHT as i64),
        _ => (f.left as i64, f.bottom() as i64),
    };
    (
        x.clamp(0, (scene.width - BAG_WIDTH) as i64) as usize,
        y.clamp(0, (scene.height - BAG_HEIGHT) as i64) as usize,
    )
}

/// Place the bag clear of all furniture (4 px margin) so the far partition
/// of the occlusion analysis stays clean.
fn place_far(r: &mut rand_chacha::ChaCha8Rng, scene: &SceneSpec, boxes: &[Rect]) -> (usize, usize) {
    let mut x = 0;
    let mut y = 0;
    for _ in 0..64 {
        x = rng::uniform_int(r, 0, (scene.width - BAG_WIDTH) as i64) as usize;
        y = rng::uniform_int(r, 0, (scene.height - BAG_HEIGHT) as i64) as usize;
        let rect = Rect {
            top: y,
            left: x,
            height: BAG_HEIGHT,
            width: BAG_WIDTH,
        };
        if !boxes.iter().any(|f| rect.intersects_dilated(f, 4)) {
            return (x, y);
        }
    }
    (x, y)
}

/// How many of a scene's events carry a bag. Targets a 50/50 frame-label
/// balance (bag events contribute background frames before `appear_frame`),
/// clamped so the event mix itself stays within 40-60%.
fn bag_event_count(events_per_scene: usize, frames_per_event: usize) -> usize {
    let appear = (frames_per_event / 10).max(1);
    let abandoned_per_bag_event = frames_per_event - appear;
    let ideal = (events_per_scene * frames_per_event + abandoned_per_bag_event)
        / (2 * abandoned_per_bag_event);
    let lo = (2 * events_per_scene).div_ceil(5).max(1);
    let hi = (3 * events_per_scene / 5).min(events_per_scene - 1).max(lo);
    ideal.clamp(lo, hi)
}

/// Generate `events_per_scene` events for every scene: bag events spread
/// evenly over the ordinals, the near-furniture condition on every other bag
/// event. Event k of scene s becomes video "<scene_id>-e<k:02>".
pub fn generate_corpus(
    scenes: &[SceneSpec],
    events_per_scene: usize,
    frames_per_event: usize,
    seed: u64,
) -> Result<Corpus> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("empty scene list".into()));
    }
    if events_per_scene < 2 {
        return Err(Error::InvalidArgument(format!(
            "events_per_scene must be >= 2 for a bag/no-bag mix, got {events_per_scene}"
        )));
    }
    if frames_per_event < 2 {
        return Err(Error::InvalidArgument(format!(
            "frames_per_event must be >= 2 so bags can appear mid-video, got {frames_per_event}"
        )));
    }
    let bags = bag_event_count(events_per_scene, frames_per_event);
    let mut frames = Vec::new();
    let mut events = Vec::new();
    for scene in scenes {
        scene.validate()?;
        let boxes = furniture_boxes(scene);
        let mut bag_ordinal = 0usize;
        for k in 0..events_per_scene {
            let event_id = format!("{}-e{:02}", scene.scene_id, k);
            // Bresenham spread: exactly `bags` events, evenly interleaved.
            let has_bag = (k + 1) * bags / events_per_scene > k * bags / events_per_scene;
            let mut place_rng = seeded(mix_seed(seed ^ PLACEMENT_SALT, &event_id));
            let bag = if has_bag {
                let near = bag_ordinal % 2 == 1 && !boxes.is_empty();
                bag_ordinal += 1;
                let (x, y) = if near {
                    place_near(&mut place_rng, scene, &boxes)
                } else {
                    place_far(&mut place_rng, scene, &boxes)
                };
                Some(BagSpec {
                    appear_frame: (frames_per_event / 10).max(1),
                    x,
                    y,
                    near_furniture: near,
                })
            } else {
                None
            };
            let spec = EventSpec {
                event_id: event_id.clone(),
                scene: scene.clone(),
                num_frames: frames_per_event,
                num_persons: DEFAULT_PERSONS_PER_EVENT,
                bag,
                motion_seed: mix_seed(seed, &event_id),
            };
            frames.extend(generate_event(&spec)?);
            events.push(EventMeta {
                video_id: event_id,
                has_bag,
                appear_frame: spec.bag.map(|b| b.appear_frame),
                near_furniture: spec.bag.map(|b| b.near_furniture).unwrap_or(false),
                num_persons: spec.num_persons,
            });
        }
    }
    Ok(Corpus { frames, events })
}

/// Canonical frame file name: "<video_id>_<frame_index, 6 digits>.png".
pub fn frame_file_name(video_id: &str, frame_index: usize) -> String {
    format!("{video_id}_{frame_index:06}.png")
}

/// Write frames as PNGs under `dir` and return path-backed records. The
/// records' image refs are relative to `dir`.
pub fn write_frames(frames: &[GeneratedFrame], dir: &Path) -> Result<Vec<FrameRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(frames.len());
    for frame in frames {
        let name = frame_file_name(&frame.video_id, frame.frame_index);
        frame.image.save_png(&dir.join(&name))?;
        records.push(FrameRecord {
            image_ref: ImageRef::Path(PathBuf::from(name)),
            label: frame.label,
            video_id: frame.video_id.clone(),
            frame_index: frame.frame_index,
            variant: Variant::OrigColor,
        });
    }
    Ok(records)
}

/// Wrap frames as in-memory records, for pipelines that never touch disk.
pub fn memory_records(frames: &[GeneratedFrame]) -> Vec<FrameRecord> {
    frames
        .iter()
        .map(|frame| FrameRecord {
            image_ref: ImageRef::Memory(Arc::new(frame.image.clone())),
            label: frame.label,
            video_id: frame.video_id.clone(),
            frame_index: frame.frame_index,
            variant: Variant::OrigColor,
        })
        .collect()
}

/// Ingest result: the records plus a summary of files that were skipped.
#[derive(Debug)]
pub struct Ingest {
    pub records: Vec<FrameRecord>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Scan `path`'s subdirectories for frames. Subdirectory names map to labels
/// through `label_rule`; unmapped subdirectories are ignored. Files that are
/// misnamed or undecodable are skipped and reported.
pub fn ingest_frames_dir(
    path: &Path,
    label_rule: &BTreeMap<String, Label>,
) -> Result<Ingest> {
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<_>>()?;
    entries.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for sub in entries {
        if !sub.is_dir() {
            continue;
        }
        let Some(label) = sub
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| label_rule.get(n).copied())
        else {
            continue;
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(&sub, e)))
            .collect::<Result<_>>()?;
        files.sort();
        for file in files {
            if file.is_dir() {
                continue;
            }
            let parsed = file
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|stem| stem.rsplit_once('_'))
                .and_then(|(video, idx)| idx.parse::<usize>().ok().map(|i| (video.to_string(), i)));
            let Some((video_id, frame_index)) = parsed else {
                skipped.push((
                    file,
                    "file name does not match <video_id>_<frame_index>.<ext>".into(),
                ));
                continue;
            };
            if let Err(e) = Image::load_png(&file) {
                skipped.push((file, e.to_string()));
                continue;
            }
            records.push(FrameRecord {
                image_ref: ImageRef::Path(file),
                label,
                video_id,
                frame_index,
                variant: Variant::OrigColor,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyIngest(path.to_path_buf()));
    }
    records.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(Ingest { records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64) -> SceneSpec {
        SceneSpec::desk("lab", seed)
    }

    fn bag_event(appear_frame: usize) -> EventSpec {
        EventSpec {
            event_id: "lab-e00".into(),
            scene: scene(5),
            num_frames: 30,
            num_persons: 2,
            bag: Some(BagSpec {
                appear_frame,
                x: 12,
                y: 40,
                near_furniture: false,
            }),
            motion_seed: 9,
        }
    }

    #[test]
    fn background_is_deterministic() {
        let spec = scene(3);
        assert_eq!(
            render_background(&spec).unwrap(),
            render_background(&spec).unwrap()
        );
    }

    #[test]
    fn background_has_requested_shape() {
        let img = render_background(&scene(3)).unwrap();
        assert_eq!(img.height(), 64);
        assert_eq!(img.width(), 64);
        assert_eq!(img.data().len(), 64 * 64 * 3);
    }

    #[test]
    fn background_seeds_1_and_2_differ() {
        let a = render_background(&scene(1)).unwrap();
        let b = render_background(&scene(2)).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn distinct_scene_ids_differ() {
        let a = render_background(&SceneSpec::desk("hall", 7)).unwrap();
        let b = render_background(&SceneSpec::desk("lobby", 7)).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn background_rejects_small_dimensions() {
        let spec = SceneSpec::new("tiny", 16, 64, 0, 0);
        assert!(matches!(
            render_background(&spec).unwrap_err(),
            Error::InvalidSpec(_)
        ));
    }

    #[test]
    fn furniture_props_are_solid_and_in_bounds() {
        let spec = SceneSpec::new("lab", 64, 64, 3, 3);
        let boxes = furniture_boxes(&spec);
        assert_eq!(boxes.len(), 3);
        let img = render_background(&spec).unwrap();
        for rect in &boxes {
            assert!(rect.bottom() <= 64 && rect.right() <= 64);
            let first = img.get(rect.top, rect.left);
            for y in rect.top..rect.bottom() {
                for x in rect.left..rect.right() {
                    // later props may overdraw earlier ones; a prop pixel is
                    // solid unless a later box covers it
                    let covered_by_later = boxes
                        .iter()
                        .skip_while(|b| *b != rect)
                        .skip(1)
                        .any(|b| y >= b.top && y < b.bottom() && x >= b.left && x < b.right());
                    if !covered_by_later {
                        assert_eq!(img.get(y, x), first);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_flip_at_appear_frame() {
        let frames = generate_event(&bag_event(10)).unwrap();
        assert_eq!(frames.len(), 30);
        for f in &frames {
            let expected = if f.frame_index >= 10 {
                Label::Abandoned
            } else {
                Label::Background
            };
            assert_eq!(f.label, expected, "frame {}", f.frame_index);
            assert_eq!(f.video_id, "lab-e00");
        }
    }

    #[test]
    fn bagless_event_is_all_background() {
        let mut event = bag_event(10);
        event.bag = None;
        let frames = generate_event(&event).unwrap();
        assert_eq!(frames.len(), 30);
        assert!(frames.iter().all(|f| f.label == Label::Background));
    }

    #[test]
    fn event_pixels_stay_in_unit_range() {
        for f in generate_event(&bag_event(3)).unwrap() {
            assert!(f.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn late_appear_frame_is_invalid() {
        assert!(matches!(
            generate_event(&bag_event(30)).unwrap_err(),
            Error::InvalidSpec(_)
        ));
    }

    #[test]
    fn out_of_bounds_bag_is_invalid() {
        let mut event = bag_event(10);
        event.bag = Some(BagSpec {
            appear_frame: 10,
            x: 60,
            y: 40,
            near_furniture: false,
        });
        assert!(matches!(
            generate_event(&event).unwrap_err(),
            Error::InvalidSpec(_)
        ));
    }

    #[test]
    fn near_furniture_requires_adjacency() {
        let spec = scene(5);
        let boxes = furniture_boxes(&spec);
        let f = boxes[0];
        // adjacent placement: touching the prop's right edge
        let x = (f.right()).min(spec.width - BAG_WIDTH);
        let y = f.top.min(spec.height - BAG_HEIGHT);
        let mut event = bag_event(10);
        event.bag = Some(BagSpec {
            appear_frame: 10,
            x,
            y,
            near_furniture: true,
        });
        let rect = bag_rect(event.bag.as_ref().unwrap());
        assert!(boxes.iter().any(|b| rect.intersects_dilated(b, 2)));
        assert!(generate_event(&event).is_ok());

        // a placement away from every prop contradicts the flag
        let mut far = bag_event(10);
        let mut pos = None;
        'outer: for y in 0..spec.height - BAG_HEIGHT {
            for x in 0..spec.width - BAG_WIDTH {
                let r = Rect { top: y, left: x, height: BAG_HEIGHT, width: BAG_WIDTH };
                if !boxes.iter().any(|b| r.intersects_dilated(b, 2)) {
                    pos = Some((x, y));
                    break 'outer;
                }
            }
        }
        let (x, y) = pos.expect("some clear placement exists");
        far.bag = Some(BagSpec {
            appear_frame: 10,
            x,
            y,
            near_furniture: true,
        });
        assert!(matches!(
            generate_event(&far).unwrap_err(),
            Error::InvalidSpec(_)
        ));
    }

    #[test]
    fn bag_is_static_and_persons_move() {
        let mut event = bag_event(0);
        event.num_persons = 0;
        let frames = generate_event(&event).unwrap();
        // without persons every frame equals the first: bag and background static
        for f in &frames {
            assert_eq!(f.image, frames[0].image);
        }

        let mut walking = bag_event(0);
        walking.num_persons = 1;
        let frames = generate_event(&walking).unwrap();
        assert!(frames.iter().any(|f| f.image != frames[0].image));
    }

    #[test]
    fn corpus_arithmetic_and_determinism() {
        let scenes = [SceneSpec::desk("s0", 1), SceneSpec::desk("s1", 2)];
        let a = generate_corpus(&scenes, 10, DEFAULT_FRAMES_PER_EVENT, 42).unwrap();
        assert_eq!(a.frames.len(), 600);
        assert_eq!(a.events.len(), 20);
        let b = generate_corpus(&scenes, 10, DEFAULT_FRAMES_PER_EVENT, 42).unwrap();
        assert_eq!(a, b);

        let ids: std::collections::BTreeSet<&str> =
            a.frames.iter().map(|f| f.video_id.as_str()).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn corpus_validates_inputs() {
        assert!(matches!(
            generate_corpus(&[], 4, DEFAULT_FRAMES_PER_EVENT, 0).unwrap_err(),
            Error::InvalidArgument(_)
        ));
        assert!(matches!(
            generate_corpus(&[SceneSpec::desk("s", 0)], 1, DEFAULT_FRAMES_PER_EVENT, 0).unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn corpus_label_mix_is_40_to_60_percent_abandoned_per_scene() {
        let scenes = [SceneSpec::desk("s0", 1), SceneSpec::desk("s1", 2)];
        let corpus = generate_corpus(&scenes, 10, DEFAULT_FRAMES_PER_EVENT, 42).unwrap();
        for scene in &scenes {
            let scene_frames: Vec<_> = corpus
                .frames
                .iter()
                .filter(|f| f.video_id.starts_with(&format!("{}-", scene.scene_id)))
                .collect();
            let abandoned = scene_frames
                .iter()
                .filter(|f| f.label == Label::Abandoned)
                .count();
            let fraction = abandoned as f64 / scene_frames.len() as f64;
            assert!(
                (0.40..=0.60).contains(&fraction),
                "scene {}: abandoned fraction {fraction}",
                scene.scene_id
            );
        }
    }

    #[test]
    fn corpus_mixes_bag_and_bagless_events_per_scene() {
        let corpus = generate_corpus(&[SceneSpec::desk("s0", 1)], 10, DEFAULT_FRAMES_PER_EVENT, 7).unwrap();
        let with_bag = corpus.events.iter().filter(|e| e.has_bag).count();
        assert_eq!(with_bag, 6);
        assert!((4..=6).contains(&with_bag), "event mix stays within 40-60%");
        let near = corpus
            .events
            .iter()
            .filter(|e| e.has_bag && e.near_furniture)
            .count();
        assert_eq!(near, 3);
    }

    #[test]
    fn ingest_labels_and_sorts_records() {
        let dir = tempfile::tempdir().unwrap();
        let abandoned = dir.path().join("abandoned");
        let background = dir.path().join("background");
        fs::create_dir_all(&abandoned).unwrap();
        fs::create_dir_all(&background).unwrap();
        let img = Image::zeros(4, 4);
        for i in 0..3 {
            img.save_png(&abandoned.join(format!("v07_{:06}.png", 10 - i))).unwrap();
        }
        for i in 0..5 {
            img.save_png(&background.join(format!("v03_{i:06}.png"))).unwrap();
        }
        let rule: BTreeMap<String, Label> = [
            ("abandoned".to_string(), Label::Abandoned),
            ("background".to_string(), Label::Background),
        ]
        .into();
        let ingest = ingest_frames_dir(dir.path(), &rule).unwrap();
        assert_eq!(ingest.records.len(), 8);
        assert!(ingest.skipped.is_empty());
        let keys: Vec<_> = ingest
            .records
            .iter()
            .map(|r| (r.video_id.clone(), r.frame_index))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(ingest
            .records
            .iter()
            .filter(|r| r.video_id == "v07")
            .all(|r| r.label == Label::Abandoned));
        assert_eq!(
            ingest.records.iter().filter(|r| r.video_id == "v03").count(),
            5
        );
    }

    #[test]
    fn ingest_parses_the_naming_convention() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("abandoned");
        fs::create_dir_all(&sub).unwrap();
        Image::zeros(4, 4).save_png(&sub.join("v07_000123.png")).unwrap();
        let rule: BTreeMap<String, Label> = [("abandoned".to_string(), Label::Abandoned)].into();
        let ingest = ingest_frames_dir(dir.path(), &rule).unwrap();
        assert_eq!(ingest.records[0].video_id, "v07");
        assert_eq!(ingest.records[0].frame_index, 123);
    }

    #[test]
    fn ingest_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("background");
        fs::create_dir_all(&sub).unwrap();
        let img = Image::zeros(4, 4);
        for i in 0..3 {
            img.save_png(&sub.join(format!("v01_{i:06}.png"))).unwrap();
        }
        fs::write(sub.join("v01_000099.png"), b"not a png").unwrap();
        let rule: BTreeMap<String, Label> = [("background".to_string(), Label::Background)].into();
        let ingest = ingest_frames_dir(dir.path(), &rule).unwrap();
        assert_eq!(ingest.records.len(), 3);
        assert_eq!(ingest.skipped.len(), 1);
        assert!(ingest.skipped[0].0.ends_with("v01_000099.png"));
    }

    #[test]
    fn ingest_with_nothing_decodable_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("background");
        fs::create_dir_all(&sub).unwrap();
        fs::write(sub.join("v01_000000.png"), b"junk").unwrap();
        let rule: BTreeMap<String, Label> = [("background".to_string(), Label::Background)].into();
        assert!(matches!(
            ingest_frames_dir(dir.path(), &rule).unwrap_err(),
            Error::EmptyIngest(_)
        ));
    }
}
