//! Synthetic instructed-video dataset with known motion programs.
//!
//! Each clip renders one colored shape following a verb (move in a
//! direction, grow, or shrink) over n frames, captioned by a template
//! instruction. Ground-truth programs make oracle evaluation possible:
//! the compliance oracle detects the colored blob per frame, fits
//! displacement and size slopes, and infers the verb, substituting for
//! learned video metrics at this scale.
//!
//! Pixels are quantized to the 1/256 grid so the latent codec round-trips
//! bit-exactly.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CLIP_MAGIC: &[u8; 8] = b"SEERCLIP";
pub const CLIP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Shape> {
        Self::ALL.into_iter().find(|x| x.word() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn parse(s: &str) -> Option<Color> {
        Self::ALL.into_iter().find(|x| x.word() == s)
    }

    /// RGB on the 1/256 grid.
    pub fn rgb(&self) -> [f32; 3] {
        match self {
            Color::Red => [224.0 / 256.0, 32.0 / 256.0, 32.0 / 256.0],
            Color::Green => [32.0 / 256.0, 192.0 / 256.0, 32.0 / 256.0],
            Color::Blue => [32.0 / 256.0, 64.0 / 256.0, 224.0 / 256.0],
        }
    }
}

const BACKGROUND: f32 = 16.0 / 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verb {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    Grow,
    Shrink,
}

impl Verb {
    pub const ALL: [Verb; 6] =
        [Verb::MoveLeft, Verb::MoveRight, Verb::MoveUp, Verb::MoveDown, Verb::Grow, Verb::Shrink];

    pub fn key(&self) -> &'static str {
        match self {
            Verb::MoveLeft => "move_left",
            Verb::MoveRight => "move_right",
            Verb::MoveUp => "move_up",
            Verb::MoveDown => "move_down",
            Verb::Grow => "grow",
            Verb::Shrink => "shrink",
        }
    }

    pub fn parse(s: &str) -> Option<Verb> {
        Self::ALL.into_iter().find(|x| x.key() == s)
    }

    /// The opposite motion, for manipulation pairs.
    pub fn flipped(&self) -> Verb {
        match self {
            Verb::MoveLeft => Verb::MoveRight,
            Verb::MoveRight => Verb::MoveLeft,
            Verb::MoveUp => Verb::MoveDown,
            Verb::MoveDown => Verb::MoveUp,
            Verb::Grow => Verb::Shrink,
            Verb::Shrink => Verb::Grow,
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Ground-truth generative program of one clip.
#[derive(Clone, Copy, Debug)]
pub struct SceneProgram {
    pub shape: Shape,
    pub color: Color,
    /// Half-extent in pixels at frame 0.
    pub size0: f64,
    /// Center at frame 0, pixel-center coordinates.
    pub position0: (f64, f64),
    pub verb: Verb,
    /// Pixels per frame (move) or half-extent change per frame (grow/shrink).
    pub speed: f64,
    pub seed: u64,
}

impl SceneProgram {
    /// Center and half-extent at a frame index.
    pub fn state_at(&self, frame: usize) -> (f64, f64, f64) {
        let t = frame as f64;
        let (mut x, mut y) = self.position0;
        let mut h = self.size0;
        match self.verb {
            Verb::MoveLeft => x -= self.speed * t,
            Verb::MoveRight => x += self.speed * t,
            Verb::MoveUp => y -= self.speed * t,
            Verb::MoveDown => y += self.speed * t,
            Verb::Grow => h += self.speed * t,
            Verb::Shrink => h -= self.speed * t,
        }
        (x, y, h)
    }

    /// True if every frame keeps the shape fully inside the canvas.
    pub fn fits(&self, frames: usize, side: usize) -> bool {
        for i in 0..frames {
            let (x, y, h) = self.state_at(i);
            if h < 1.0 {
                return false;
            }
            if x - h < 0.5 || y - h < 0.5 || x + h > side as f64 - 0.5 || y + h > side as f64 - 0.5
            {
                return false;
            }
        }
        true
    }

    /// Template instruction: "move the <color> <shape> <dir>" or
    /// "<grow|shrink> the <color> <shape>".
    pub fn instruction(&self) -> String {
        instruction_for(self.verb, self.color, self.shape)
    }
}

pub fn instruction_for(verb: Verb, color: Color, shape: Shape) -> String {
    let (c, s) = (color.word(), shape.word());
    match verb {
        Verb::MoveLeft => format!("move the {c} {s} left"),
        Verb::MoveRight => format!("move the {c} {s} right"),
        Verb::MoveUp => format!("move the {c} {s} up"),
        Verb::MoveDown => format!("move the {c} {s} down"),
        Verb::Grow => format!("grow the {c} {s}"),
        Verb::Shrink => format!("shrink the {c} {s}"),
    }
}

/// Parse (verb, color, shape) back out of a template instruction.
pub fn parse_instruction(text: &str) -> Result<(Verb, Color, Shape)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Data(format!("instruction '{text}' does not match the grammar"));
    match words.as_slice() {
        ["move", "the", c, s, dir] => {
            let color = Color::parse(c).ok_or_else(bad)?;
            let shape = Shape::parse(s).ok_or_else(bad)?;
            let verb = match *dir {
                "left" => Verb::MoveLeft,
                "right" => Verb::MoveRight,
                "up" => Verb::MoveUp,
                "down" => Verb::MoveDown,
                _ => return Err(bad()),
            };
            Ok((verb, color, shape))
        }
        [v @ ("grow" | "shrink"), "the", c, s] => {
            let color = Color::parse(c).ok_or_else(bad)?;
            let shape = Shape::parse(s).ok_or_else(bad)?;
            let verb = if *v == "grow" { Verb::Grow } else { Verb::Shrink };
            Ok((verb, color, shape))
        }
        _ => Err(bad()),
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, h: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= h && dy.abs() <= h,
        Shape::Circle => dx * dx + dy * dy <= h * h,
        // apex up: base at dy = +h, width tapering to zero at dy = -h
        Shape::Triangle => dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0,
    }
}

/// Rasterize one frame; no anti-aliasing, pixel centers at k + 0.5.
pub fn render(program: &SceneProgram, frame: usize, side: usize) -> Vec<f32> {
    let (cx, cy, h) = program.state_at(frame);
    let rgb = program.color.rgb();
    let mut out = vec![BACKGROUND; 3 * side * side];
    for py in 0..side {
        for px in 0..side {
            let dx = (px as f64 + 0.5) - cx;
            let dy = (py as f64 + 0.5) - cy;
            if inside(program.shape, dx, dy, h) {
                for ch in 0..3 {
                    out[ch * side * side + py * side + px] = rgb[ch];
                }
            }
        }
    }
    out
}

/// Render all frames, [n, 3, side, side] flat.
pub fn render_clip(program: &SceneProgram, frames: usize, side: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(frames * 3 * side * side);
    for i in 0..frames {
        out.extend(render(program, i, side));
    }
    out
}

/// One dataset entry.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub program: SceneProgram,
    pub instruction: String,
}

/// Draw a program for (verb, color, shape) that stays in frame, by
/// rejection over positions/sizes/speeds from a keyed stream.
fn sample_program(
    verb: Verb,
    color: Color,
    shape: Shape,
    frames: usize,
    side: usize,
    rng: &mut Rng,
) -> SceneProgram {
    loop {
        let size0 = match verb {
            Verb::Grow => 2.0 + rng.below(2) as f64,   // 2..3
            Verb::Shrink => 6.0 + rng.below(3) as f64, // 6..8
            _ => 3.0 + rng.below(3) as f64,            // 3..5
        };
        let speed = match verb {
            Verb::Grow | Verb::Shrink => 0.5,
            _ => 1.0 + rng.below(2) as f64, // 1 or 2 px/frame
        };
        // positions at half-integers so symmetric shapes have exact centroids
        let x0 = rng.below(side) as f64 + 0.5;
        let y0 = rng.below(side) as f64 + 0.5;
        let program = SceneProgram {
            shape,
            color,
            size0,
            position0: (x0, y0),
            verb,
            speed,
            seed: rng.next_u64(),
        };
        if program.fits(frames, side) {
            return program;
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub count: usize,
    pub frames: usize,
    pub side: usize,
    pub train_fraction: f64,
    /// How many (verb, color, shape) combos are excluded from training and
    /// appear only in validation (composition generalization).
    pub held_out_combos: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 500,
            frames: 8,
            side: 32,
            train_fraction: 0.8,
            held_out_combos: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub held_out: Vec<(Verb, Color, Shape)>,
}

/// Deterministic dataset: balanced over verbs and shapes, 80/20 split,
/// validation seeded with held-out combos absent from training.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.count < 10 {
        return Err(Error::Config(format!("dataset count {} < 10", cfg.count)));
    }
    let root = Rng::new(cfg.seed).derive(&[0x64617461]);

    // held-out combos: one per verb, rotating colors/shapes
    let mut held_out = Vec::new();
    {
        let mut r = root.derive(&[1]);
        let co = r.below(3);
        let so = r.below(3);
        for (i, verb) in Verb::ALL.iter().enumerate() {
            if held_out.len() >= cfg.held_out_combos {
                break;
            }
            held_out.push((*verb, Color::ALL[(co + i) % 3], Shape::ALL[(so + i * 2) % 3]));
        }
    }
    let is_held_out =
        |v: Verb, c: Color, s: Shape| held_out.iter().any(|&(hv, hc, hs)| (hv, hc, hs) == (v, c, s));

    let train_count = (cfg.count as f64 * cfg.train_fraction).round() as usize;
    let val_count = cfg.count - train_count;
    let mut train = Vec::with_capacity(train_count);
    let mut val = Vec::with_capacity(val_count);

    for i in 0..train_count {
        let verb = Verb::ALL[i % 6];
        let shape = Shape::ALL[(i / 6) % 3];
        let mut r = root.derive(&[2, i as u64]);
        let color = loop {
            let c = Color::ALL[r.below(3)];
            if !is_held_out(verb, c, shape) {
                break c;
            }
        };
        let program = sample_program(verb, color, shape, cfg.frames, cfg.side, &mut r);
        train.push(Clip {
            id: format!("clip_{i:05}"),
            instruction: program.instruction(),
            program,
        });
    }
    for j in 0..val_count {
        let i = train_count + j;
        let mut r = root.derive(&[3, j as u64]);
        // alternate held-out and seen combos
        let (verb, color, shape) = if j % 2 == 0 && !held_out.is_empty() {
            held_out[(j / 2) % held_out.len()]
        } else {
            let verb = Verb::ALL[j % 6];
            let shape = Shape::ALL[(j / 6) % 3];
            let color = loop {
                let c = Color::ALL[r.below(3)];
                if !is_held_out(verb, c, shape) {
                    break c;
                }
            };
            (verb, color, shape)
        };
        let program = sample_program(verb, color, shape, cfg.frames, cfg.side, &mut r);
        val.push(Clip {
            id: format!("clip_{i:05}"),
            instruction: program.instruction(),
            program,
        });
    }
    Ok(Dataset { train, val, held_out })
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

/// Raw frames file: magic, version, n/h/w, then n*3*h*w little-endian f32.
pub fn write_clip_file(path: &Path, frames: &[f32], n: usize, h: usize, w: usize) -> Result<()> {
    if frames.len() != n * 3 * h * w {
        return Err(Error::Shape(format!(
            "clip file: {} values for {n}x3x{h}x{w}",
            frames.len()
        )));
    }
    let mut buf = Vec::with_capacity(24 + frames.len() * 4);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct ClipFile {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<f32>,
}

pub fn read_clip_file(path: &Path) -> Result<ClipFile> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header)?;
    if &header[0..8] != CLIP_MAGIC {
        return Err(Error::Data(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported clip version {version}",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != n * 3 * h * w * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n * 3 * h * w * 4,
            raw.len()
        )));
    }
    let frames = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ClipFile { n, h, w, frames })
}

/// Write one split directory: clip files plus a tab-separated manifest
/// (clip_id, instruction, verb, color, shape, speed, seed).
fn write_split(dir: &Path, clips: &[Clip], frames: usize, side: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for clip in clips {
        let pixels = render_clip(&clip.program, frames, side);
        write_clip_file(&dir.join(format!("{}.clip", clip.id)), &pixels, frames, side, side)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            clip.id,
            clip.instruction,
            clip.program.verb.key(),
            clip.program.color.word(),
            clip.program.shape.word(),
            clip.program.speed,
            clip.program.seed,
        ));
    }
    let mut f = fs::File::create(dir.join("manifest.tsv"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn write_dataset(out: &Path, ds: &Dataset, cfg: &DatasetConfig) -> Result<()> {
    write_split(&out.join("train"), &ds.train, cfg.frames, cfg.side)?;
    write_split(&out.join("val"), &ds.val, cfg.frames, cfg.side)?;
    Ok(())
}

/// One manifest row plus the path of its frames file.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub instruction: String,
    pub verb: Verb,
    pub color: Color,
    pub shape: Shape,
    pub speed: f64,
    pub seed: u64,
    pub path: PathBuf,
}

pub fn read_manifest(split_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(split_dir.join("manifest.tsv"))
        .map_err(|e| Error::Data(format!("{}: {e}", split_dir.join("manifest.tsv").display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!(
                "manifest line {}: {} fields, expected 7",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| Error::Data(format!("manifest line {}: bad {what}", lineno + 1));
        out.push(ManifestEntry {
            clip_id: fields[0].to_string(),
            instruction: fields[1].to_string(),
            verb: Verb::parse(fields[2]).ok_or_else(|| parse_err("verb"))?,
            color: Color::parse(fields[3]).ok_or_else(|| parse_err("color"))?,
            shape: Shape::parse(fields[4]).ok_or_else(|| parse_err("shape"))?,
            speed: fields[5].parse().map_err(|_| parse_err("speed"))?,
            seed: fields[6].parse().map_err(|_| parse_err("seed"))?,
            path: split_dir.join(format!("{}.clip", fields[0])),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// compliance oracle
// ---------------------------------------------------------------------------

/// Per-frame blob measurement.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    area: f64,
}

/// Largest connected component of pixels matching `color`, by a dominance
/// threshold robust to the blur of sampled frames.
fn detect_blob(frame: &[f32], side: usize, color: Color) -> Option<Blob> {
    let px = |ch: usize, y: usize, x: usize| frame[ch * side * side + y * side + x];
    let matches = |y: usize, x: usize| -> bool {
        let (r, g, b) = (px(0, y, x), px(1, y, x), px(2, y, x));
        let score = match color {
            Color::Red => r - (g + b) * 0.5,
            Color::Green => g - (r + b) * 0.5,
            Color::Blue => b - (r + g) * 0.5,
        };
        score > 0.2
    };
    let mut seen = vec![false; side * side];
    let mut best: Option<(usize, f64, f64)> = None; // (count, sum_x, sum_y)
    for sy in 0..side {
        for sx in 0..side {
            if seen[sy * side + sx] || !matches(sy, sx) {
                continue;
            }
            // BFS over the 4-connected component
            let mut queue = vec![(sy, sx)];
            seen[sy * side + sx] = true;
            let (mut count, mut sum_x, mut sum_y) = (0usize, 0f64, 0f64);
            while let Some((y, x)) = queue.pop() {
                count += 1;
                sum_x += x as f64 + 0.5;
                sum_y += y as f64 + 0.5;
                let mut push = |ny: usize, nx: usize| {
                    if !seen[ny * side + nx] && matches(ny, nx) {
                        seen[ny * side + nx] = true;
                        queue.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < side {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < side {
                    push(y, x + 1);
                }
            }
            if best.map_or(true, |(bc, _, _)| count > bc) {
                best = Some((count, sum_x, sum_y));
            }
        }
    }
    best.filter(|&(count, _, _)| count >= 4).map(|(count, sx, sy)| Blob {
        cx: sx / count as f64,
        cy: sy / count as f64,
        area: count as f64,
    })
}

/// Least-squares slope of y over frame indices.
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in points {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Oracle verdict over a predicted clip.
#[derive(Clone, Debug)]
pub struct OracleVerdict {
    pub verb_match: bool,
    /// Signed slope of the decisive measurement (px/frame or size/frame).
    pub slope: f64,
    /// Fraction of frames with a detected blob.
    pub detection_confidence: f64,
    pub detected_verb: Option<Verb>,
}

/// Judge whether a clip's motion matches the instruction verb. Frames are
/// [n, 3, side, side]. Detection in fewer than half the frames is an
/// "undetected" verdict (non-compliant, detected_verb = None).
pub fn oracle_check(
    frames: &[f32],
    n: usize,
    side: usize,
    instruction: &str,
) -> Result<OracleVerdict> {
    let (verb, color, _) = parse_instruction(instruction)?;
    let fsz = 3 * side * side;
    if frames.len() != n * fsz {
        return Err(Error::Shape(format!(
            "oracle_check: {} values for {n} frames of {fsz}",
            frames.len()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut sizes = Vec::new();
    let mut detected = 0usize;
    for i in 0..n {
        if let Some(blob) = detect_blob(&frames[i * fsz..(i + 1) * fsz], side, color) {
            detected += 1;
            xs.push((i as f64, blob.cx));
            ys.push((i as f64, blob.cy));
            sizes.push((i as f64, blob.area.sqrt()));
        }
    }
    let confidence = detected as f64 / n as f64;
    if detected * 2 < n || detected < 2 {
        return Ok(OracleVerdict {
            verb_match: false,
            slope: 0.0,
            detection_confidence: confidence,
            detected_verb: None,
        });
    }
    let sx = slope(&xs);
    let sy = slope(&ys);
    let ss = slope(&sizes);
    // strongest signed trend wins
    let (detected_verb, decisive) = if sx.abs() >= sy.abs() && sx.abs() >= ss.abs() {
        (if sx < 0.0 { Verb::MoveLeft } else { Verb::MoveRight }, sx)
    } else if sy.abs() >= ss.abs() {
        (if sy < 0.0 { Verb::MoveUp } else { Verb::MoveDown }, sy)
    } else {
        (if ss > 0.0 { Verb::Grow } else { Verb::Shrink }, ss)
    };
    Ok(OracleVerdict {
        verb_match: detected_verb == verb,
        slope: decisive,
        detection_confidence: confidence,
        detected_verb: Some(detected_verb),
    })
}
