//! Inference loop: crops, template caching, per-frame search, and the
//! synthetic sequence generator with its container format.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::{Region, Stream, TokenMatrix};
use crate::bbox::BoundingBox;
use crate::error::{contract, Error, Result};
use crate::head::{decode_box, HeadOutputs};
use crate::model::Model;
use crate::tensor::Tensor;

pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;

/// Registered RGB and TIR frames, `3 x H x W` each, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub rgb: Tensor<f32>,
    pub tir: Tensor<f32>,
}

impl FramePair {
    pub fn new(rgb: Tensor<f32>, tir: Tensor<f32>) -> Result<Self> {
        let s = rgb.shape();
        if s.len() != 3 || s[0] != 3 || tir.shape() != s {
            return Err(contract(format!("frame pair shapes {:?} and {:?} are not registered", s, tir.shape())));
        }
        Ok(Self { rgb, tir })
    }

    /// Builds a pair from a single thermal plane, replicated to three channels.
    pub fn from_planes(rgb: Tensor<f32>, tir_plane: &[f32]) -> Result<Self> {
        let s = rgb.shape().to_vec();
        if tir_plane.len() != s[1] * s[2] {
            return Err(Error::Shape(vec![tir_plane.len()]));
        }
        let tir = Tensor::new(s, tir_plane.repeat(3))?;
        Self::new(rgb, tir)
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn tir_plane(&self) -> &[f32] {
        &self.tir.data()[..self.height() * self.width()]
    }
}

/// Affine patch-to-frame transform: `frame = origin + patch * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMapping {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
}

impl CropMapping {
    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u * self.scale, self.y0 + v * self.scale)
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.scale, (y - self.y0) / self.scale)
    }

    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BoundingBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_patch(b.x, b.y);
        BoundingBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

pub fn crop_geometry(b: &BoundingBox, factor: f64, out_side: usize) -> Result<(f64, CropMapping)> {
    b.validate()?;
    if !(factor > 0.0) || out_side == 0 {
        return Err(contract("crop needs a positive area factor and output side"));
    }
    let side = factor * (b.w * b.h).sqrt();
    let (cx, cy) = b.center();
    Ok((
        side,
        CropMapping {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            scale: side / out_side as f64,
        },
    ))
}

/// Square crop of side `factor * sqrt(w h)` around the box center, resampled
/// bilinearly to `out_side`; pixels outside the frame read the channel mean.
pub fn crop_resize(image: &Tensor<f32>, b: &BoundingBox, factor: f64, out_side: usize) -> Result<(Tensor<f32>, CropMapping)> {
    let (_, map) = crop_geometry(b, factor, out_side)?;
    let s = image.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(ch * out_side * out_side);
    for c in 0..ch {
        let src = &d[c * plane..(c + 1) * plane];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let at = |r: i64, col: i64| -> f64 {
            if r < 0 || col < 0 || r >= h as i64 || col >= w as i64 {
                mean
            } else {
                src[r as usize * w + col as usize] as f64
            }
        };
        for v in 0..out_side {
            for u in 0..out_side {
                // pixel centers sit at half-integer continuous coordinates
                let (fx, fy) = map.to_frame(u as f64 + 0.5, v as f64 + 0.5);
                let (px, py) = (fx - 0.5, fy - 0.5);
                let (x0, y0) = (px.floor(), py.floor());
                let (ax, ay) = (px - x0, py - y0);
                let (xi, yi) = (x0 as i64, y0 as i64);
                let val = (1.0 - ay) * ((1.0 - ax) * at(yi, xi) + ax * at(yi, xi + 1))
                    + ay * ((1.0 - ax) * at(yi + 1, xi) + ax * at(yi + 1, xi + 1));
                out.push(val as f32);
            }
        }
    }
    Ok((Tensor::new(vec![ch, out_side, out_side], out)?, map))
}

/// `(x - 0.5) / 0.5`, for inputs in `[0, 1]`.
pub fn normalize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v - 0.5) / 0.5)
}

/// Normalized crops of both modalities.
pub fn crop_pair(pair: &FramePair, b: &BoundingBox, factor: f64, side: usize) -> Result<([Tensor<f32>; 2], CropMapping)> {
    let (r, map) = crop_resize(&pair.rgb, b, factor, side)?;
    let (t, _) = crop_resize(&pair.tir, b, factor, side)?;
    Ok(([normalize(&r), normalize(&t)], map))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub bbox: BoundingBox,
    /// Embedded template tokens, RGB then TIR.
    pub template: [Tensor<f32>; 2],
    pub frame_index: usize,
    pub frame_size: (usize, usize),
}

pub fn track_init(model: &Model<f32>, pair: &FramePair, gt: &BoundingBox) -> Result<TrackerState> {
    gt.validate()?;
    let cfg = model.cfg();
    let (imgs, _) = crop_pair(pair, gt, TEMPLATE_FACTOR, cfg.template_side)?;
    let mut tape = model.tape();
    let z = model.embed_templates(&mut tape, &imgs)?;
    Ok(TrackerState {
        bbox: *gt,
        template: [tape.value(z[0].var).clone(), tape.value(z[1].var).clone()],
        frame_index: 0,
        frame_size: (pair.width(), pair.height()),
    })
}

/// Search crop around the previous box, forward, decode, map back, clip.
pub fn track_update(model: &Model<f32>, state: &mut TrackerState, pair: &FramePair) -> Result<(BoundingBox, f64)> {
    let cfg = model.cfg();
    let (imgs, map) = crop_pair(pair, &state.bbox, SEARCH_FACTOR, cfg.search_side)?;
    let maps = {
        let mut tape: Tape<'_, f32> = model.tape();
        let tg = cfg.template_grid();
        let mut z = [None, None];
        for (m, s) in [Stream::Rgb, Stream::Tir].into_iter().enumerate() {
            let v = tape.constant(state.template[m].clone());
            z[m] = Some(TokenMatrix::new(&tape, v, tg, tg, s, Region::Template)?);
        }
        let x = model.embed_search(&mut tape, &imgs)?;
        let out = model.forward_tokens(&mut tape, [z[0].unwrap(), z[1].unwrap()], x, &model.fusion_layers())?;
        HeadOutputs::from_tape(&tape, &out.head)
    };
    let (b, conf) = decode_box(&maps, cfg.search_side as f64)?;
    let mut fb = map.box_to_frame(&b);
    if !fb.is_valid() {
        fb = BoundingBox::from_center(state.bbox.center().0, state.bbox.center().1, 1.0, 1.0);
    }
    let fb = fb.clip(pair.width() as f64, pair.height() as f64);
    state.bbox = fb;
    state.frame_index += 1;
    Ok((fb, conf))
}

/// Tracks a whole sequence; frame 0 initializes from `init`.
pub fn track_sequence(model: &Model<f32>, frames: &[FramePair], init: &BoundingBox) -> Result<Vec<BoundingBox>> {
    let first = frames.first().ok_or_else(|| contract("empty sequence"))?;
    let mut st = track_init(model, first, init)?;
    let mut out = vec![*init];
    for f in &frames[1..] {
        out.push(track_update(model, &mut st, f)?.0);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Effect {
    RgbBlackout,
    TirCrossover,
    Occlusion,
    IlluminationRamp,
}

impl Effect {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb-blackout" => Ok(Effect::RgbBlackout),
            "tir-crossover" => Ok(Effect::TirCrossover),
            "occlusion" => Ok(Effect::Occlusion),
            "illumination-ramp" => Ok(Effect::IlluminationRamp),
            _ => Err(Error::Parse(format!("unknown effect {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Effect::RgbBlackout => "rgb-blackout",
            Effect::TirCrossover => "tir-crossover",
            Effect::Occlusion => "occlusion",
            Effect::IlluminationRamp => "illumination-ramp",
        }
    }
}

/// Scene description: linear target trajectory plus per-frame effects over
/// half-open frame ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub start: BoundingBox,
    pub velocity: (f64, f64),
    pub background_temp: f32,
    /// Thermal target minus background.
    pub contrast: f32,
    pub effects: Vec<(Effect, usize, usize)>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 96,
            width: 96,
            start: BoundingBox::new(36.0, 36.0, 16.0, 16.0),
            velocity: (1.0, 1.0),
            background_temp: 0.3,
            contrast: 0.5,
            effects: Vec::new(),
        }
    }
}

impl SceneSpec {
    pub fn gt(&self, t: usize) -> BoundingBox {
        let b = self.start;
        BoundingBox::new(b.x + self.velocity.0 * t as f64, b.y + self.velocity.1 * t as f64, b.w, b.h)
    }

    pub fn active(&self, e: Effect, t: usize) -> bool {
        self.effects.iter().any(|&(k, a, b)| k == e && (a..b).contains(&t))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(contract("scene needs frames and a positive frame size"));
        }
        self.start.validate()?;
        for t in 0..self.frames {
            let b = self.gt(t);
            if b.x < 0.0 || b.y < 0.0 || b.right() > self.width as f64 || b.bottom() > self.height as f64 {
                return Err(contract(format!("target leaves the frame at frame {t}: {b:?}")));
            }
        }
        Ok(())
    }

    /// `key=value` lines: frames, height, width, box=x,y,w,h, velocity=dx,dy,
    /// background, contrast, effect=name:start-end (repeatable).
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        let nums = |v: &str, n: usize| -> Result<Vec<f64>> {
            let xs: Vec<f64> = v
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::Parse(format!("bad number in {v:?}"))))
                .collect::<Result<_>>()?;
            if xs.len() != n {
                return Err(Error::Parse(format!("expected {n} values in {v:?}")));
            }
            Ok(xs)
        };
        let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Parse(format!("bad integer {v:?}")));
        let real = |v: &str| v.parse::<f32>().map_err(|_| Error::Parse(format!("bad number {v:?}")));
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("expected key=value: {line:?}")))?;
            let v = v.trim();
            match k.trim() {
                "frames" => s.frames = int(v)?,
                "height" => s.height = int(v)?,
                "width" => s.width = int(v)?,
                "box" => {
                    let b = nums(v, 4)?;
                    s.start = BoundingBox::new(b[0], b[1], b[2], b[3]);
                }
                "velocity" => {
                    let d = nums(v, 2)?;
                    s.velocity = (d[0], d[1]);
                }
                "background" => s.background_temp = real(v)?,
                "contrast" => s.contrast = real(v)?,
                "effect" => {
                    let (name, range) = v.split_once(':').ok_or_else(|| Error::Parse(format!("effect needs name:start-end, got {v:?}")))?;
                    let (a, b) = range.split_once('-').ok_or_else(|| Error::Parse(format!("bad range {range:?}")))?;
                    s.effects.push((Effect::parse(name.trim())?, int(a.trim())?, int(b.trim())?));
                }
                other => return Err(Error::Parse(format!("unknown scene key {other:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

/// Smooth random texture: bilinear upsampling of a coarse random lattice.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize, lo: f32, hi: f32) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(lo..hi)).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (fy, fx) = (r as f32 / cell as f32, c as f32 / cell as f32);
            let (y0, x0) = (fy as usize, fx as usize);
            let (ay, ax) = (fy - y0 as f32, fx - x0 as f32);
            let g = |y: usize, x: usize| lattice[y * gw + x];
            out.push((1.0 - ay) * ((1.0 - ax) * g(y0, x0) + ax * g(y0, x0 + 1)) + ay * ((1.0 - ax) * g(y0 + 1, x0) + ax * g(y0 + 1, x0 + 1)));
        }
    }
    out
}

fn covers(b: &BoundingBox, r: usize, c: usize) -> bool {
    let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
    x >= b.x && x < b.right() && y >= b.y && y < b.bottom()
}

pub const BLACKOUT_LEVEL: f32 = 0.02;

/// Deterministic frames and ground-truth boxes for a scene.
pub fn synth_sequence(spec: &SceneSpec, seed: u64) -> Result<Vec<(FramePair, BoundingBox)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let bg: Vec<Vec<f32>> = (0..3).map(|_| texture(&mut rng, h, w, 8, 0.1, 0.5)).collect();
    let (th, tw) = (spec.start.h.ceil() as usize + 1, spec.start.w.ceil() as usize + 1);
    let tgt: Vec<Vec<f32>> = (0..3).map(|_| texture(&mut rng, th, tw, 3, 0.55, 0.95)).collect();

    let mut out = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let b = spec.gt(t);
        let occl = spec.active(Effect::Occlusion, t).then(|| {
            let (cx, _) = b.center();
            (cx - b.w / 4.0, cx + b.w / 4.0)
        });
        let occluded = |r: usize, c: usize| {
            occl.is_some_and(|(x1, x2)| {
                let x = c as f64 + 0.5;
                x >= x1 && x < x2 && covers(&BoundingBox::new(x1, b.y, x2 - x1, b.h), r, c)
            })
        };
        let illum = if spec.active(Effect::IlluminationRamp, t) {
            let (a, e) = spec
                .effects
                .iter()
                .find(|&&(k, a, e)| k == Effect::IlluminationRamp && (a..e).contains(&t))
                .map(|&(_, a, e)| (a, e))
                .unwrap();
            let p = (t - a + 1) as f32 / (e - a) as f32;
            1.0 - 0.7 * p
        } else {
            1.0
        };
        let target_temp = if spec.active(Effect::TirCrossover, t) {
            spec.background_temp
        } else {
            spec.background_temp + spec.contrast
        };
        let blackout = spec.active(Effect::RgbBlackout, t);

        let mut rgb = vec![0.0f32; 3 * h * w];
        let mut tir = vec![spec.background_temp; h * w];
        for r in 0..h {
            for c in 0..w {
                let inside = covers(&b, r, c);
                let occ = occluded(r, c);
                for ch in 0..3 {
                    let v = if blackout {
                        BLACKOUT_LEVEL
                    } else if occ {
                        0.5
                    } else if inside {
                        let (tr, tc) = ((r as f64 + 0.5 - b.y) as usize, (c as f64 + 0.5 - b.x) as usize);
                        tgt[ch][tr.min(th - 1) * tw + tc.min(tw - 1)]
                    } else {
                        bg[ch][r * w + c]
                    };
                    rgb[ch * h * w + r * w + c] = if blackout { v } else { (v * illum).clamp(0.0, 1.0) };
                }
                if inside && !occ {
                    tir[r * w + c] = target_temp;
                }
            }
        }
        let pair = FramePair::from_planes(Tensor::new(vec![3, h, w], rgb)?, &tir)?;
        out.push((pair, b));
    }
    Ok(out)
}

pub const CONTAINER_MAGIC: &[u8; 8] = b"CSTNSEQ1";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".gt.txt");
    PathBuf::from(s)
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for v in xs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_container(frames: &[(FramePair, BoundingBox)]) -> Result<Vec<u8>> {
    let (h, w) = frames.first().map(|(p, _)| (p.height(), p.width())).unwrap_or((0, 0));
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    for v in [frames.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (p, b) in frames {
        if (p.height(), p.width()) != (h, w) {
            return Err(contract("all frames in a container must share one size"));
        }
        put_f32s(&mut out, p.rgb.data());
        put_f32s(&mut out, p.tir_plane());
        put_f32s(&mut out, &[b.x as f32, b.y as f32, b.w as f32, b.h as f32]);
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<(FramePair, BoundingBox)>> {
    let bad = |m: &str| Error::Parse(format!("sequence container: {m}"));
    if bytes.len() < 20 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n, h, w) = (u(8), u(12), u(16));
    let per = 4 * (3 * h * w + h * w + 4);
    if bytes.len() != 20 + n * per {
        return Err(bad(&format!("expected {} bytes, found {}", 20 + n * per, bytes.len())));
    }
    let floats = |a: usize, len: usize| -> Vec<f32> {
        bytes[a..a + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let mut out = Vec::with_capacity(n);
    for f in 0..n {
        let base = 20 + f * per;
        let rgb = Tensor::new(vec![3, h, w], floats(base, 3 * h * w))?;
        let tir = floats(base + 12 * h * w, h * w);
        let g = floats(base + 16 * h * w, 4);
        let pair = FramePair::from_planes(rgb, &tir)?;
        out.push((pair, BoundingBox::new(g[0] as f64, g[1] as f64, g[2] as f64, g[3] as f64)));
    }
    Ok(out)
}

/// Writes the container and its `x,y,w,h` sidecar.
pub fn write_container(path: &Path, frames: &[(FramePair, BoundingBox)]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_container(frames)?)?;
    let boxes: Vec<BoundingBox> = frames.iter().map(|(_, b)| *b).collect();
    crate::eval::write_boxes(&sidecar_path(path), &boxes)
}

pub fn read_container(path: &Path) -> Result<Vec<(FramePair, BoundingBox)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_container(&buf)
}
