//! Synthetic moving-shapes clips, on-disk dataset layout, and loading.
//!
//! Layout: `<root>/<clip_id>/frames/%05d.ppm` (binary P6, maxval 255) and
//! `<root>/<clip_id>/masks/%05d.pgm` (binary P5, values {0, 255}). Frame
//! values quantize to the u8 grid at generation time, so write/read
//! round-trips are bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::ClipSample;
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Per-pixel noise, constant over time.
    StaticNoise,
    /// The noise field slides one pixel per frame: motion everywhere, but
    /// only object silhouettes belong in the mask.
    SlowDrift,
}

/// Generator settings for one clip.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// 0..=4 translating textured shapes.
    pub n_objects: usize,
    /// Speed bounds in pixels/frame (Chebyshev norm of the velocity).
    pub speed_min: i64,
    pub speed_max: i64,
    pub background: BackgroundMode,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects > 4 {
            return Err(Error::InvalidConfig(format!(
                "n_objects must be at most 4, got {}",
                self.n_objects
            )));
        }
        if self.speed_min < 1 || self.speed_max < self.speed_min {
            return Err(Error::InvalidConfig(format!(
                "speed range [{}, {}] must satisfy 1 <= min <= max",
                self.speed_min, self.speed_max
            )));
        }
        if self.t < 2 || self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig(
                "need t >= 2 and at least 16x16 frames".into(),
            ));
        }
        Ok(())
    }
}

/// One translating shape with integer kinematics. Motion is exact: the
/// texture pattern is anchored to object-local coordinates and the center
/// reflects off the frame borders.
#[derive(Clone, Debug)]
pub struct MovingObject {
    pub kind: ShapeKind,
    pub rx: i64,
    pub ry: i64,
    pub cx0: i64,
    pub cy0: i64,
    pub vx: i64,
    pub vy: i64,
    pub color: [u8; 3],
    pub texture_seed: u64,
}

impl MovingObject {
    /// Center at frame `t`, reflected so the silhouette stays inside
    /// `(width, height)`.
    pub fn center_at(&self, t: usize, width: i64, height: i64) -> (i64, i64) {
        let x = reflect(self.cx0 + self.vx * t as i64, self.rx, width - 1 - self.rx);
        let y = reflect(self.cy0 + self.vy * t as i64, self.ry, height - 1 - self.ry);
        (x, y)
    }

    /// Point-in-silhouette test for a pixel, given the object center.
    pub fn covers(&self, px: i64, py: i64, cx: i64, cy: i64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self.kind {
            ShapeKind::Ellipse => {
                let (fx, fy) = (dx as f64 / self.rx as f64, dy as f64 / self.ry as f64);
                fx * fx + fy * fy <= 1.0
            }
            ShapeKind::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Triangle => {
                // isoceles: apex (0, -ry), base corners (+-rx, ry)
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                // width grows linearly from apex to base
                let frac = (dy + self.ry) as f64 / (2 * self.ry) as f64;
                dx.abs() as f64 <= self.rx as f64 * frac
            }
        }
    }
}

fn reflect(x: i64, lo: i64, hi: i64) -> i64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let p = (x - lo).rem_euclid(2 * span);
    lo + if p <= span { p } else { 2 * span - p }
}

/// Deterministic pixel noise in [-amplitude, amplitude].
fn pixel_noise(seed: u64, x: i64, y: i64, amplitude: i64) -> i64 {
    let h = derive_seed(seed, &[x as u64, y as u64]);
    (h % (2 * amplitude as u64 + 1)) as i64 - amplitude
}

/// Sample the moving objects of a clip. Exposed so tests can rasterize the
/// analytic shapes independently.
pub fn sample_objects(cfg: &SynthConfig) -> Vec<MovingObject> {
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[tag("objects")]));
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    (0..cfg.n_objects)
        .map(|i| {
            let kind = match rng.below(3) {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let rx = rng.range_i64(w / 10, w / 5).max(2);
            let ry = rng.range_i64(h / 10, h / 5).max(2);
            let cx0 = rng.range_i64(rx, w - 1 - rx);
            let cy0 = rng.range_i64(ry, h - 1 - ry);
            // Chebyshev speed in [speed_min, speed_max]: the dominant axis
            // moves at full speed, the other anywhere up to it
            let speed = rng.range_i64(cfg.speed_min, cfg.speed_max);
            let minor = rng.range_i64(-speed, speed);
            let (mut vx, mut vy) = if rng.below(2) == 0 {
                (speed, minor)
            } else {
                (minor, speed)
            };
            if rng.below(2) == 0 {
                vx = -vx;
            }
            if rng.below(2) == 0 {
                vy = -vy;
            }
            let color = [
                80 + rng.below(176) as u8,
                80 + rng.below(176) as u8,
                80 + rng.below(176) as u8,
            ];
            MovingObject {
                kind,
                rx,
                ry,
                cx0,
                cy0,
                vx,
                vy,
                color,
                texture_seed: derive_seed(cfg.seed, &[tag("texture"), i as u64]),
            }
        })
        .collect()
}

/// Render a clip: textured shapes translate over the background, the mask is
/// the union of object silhouettes per frame. Deterministic per seed.
pub fn generate_clip(cfg: &SynthConfig) -> Result<ClipSample> {
    cfg.validate()?;
    let objects = sample_objects(cfg);
    let (w, h, t) = (cfg.width, cfg.height, cfg.t);
    let bg_seed = derive_seed(cfg.seed, &[tag("background")]);
    let mut frames = vec![0.0f32; t * 3 * h * w];
    let mut masks = vec![0.0f32; t * h * w];

    for ti in 0..t {
        let centers: Vec<(i64, i64)> = objects
            .iter()
            .map(|o| o.center_at(ti, w as i64, h as i64))
            .collect();
        let (drift_x, drift_y) = match cfg.background {
            BackgroundMode::StaticNoise => (0i64, 0i64),
            BackgroundMode::SlowDrift => (ti as i64, 0),
        };
        for py in 0..h as i64 {
            for px in 0..w as i64 {
                // top object wins; later objects draw over earlier ones
                let mut rgb: Option<[u8; 3]> = None;
                for (o, &(cx, cy)) in objects.iter().zip(&centers).rev() {
                    if o.covers(px, py, cx, cy) {
                        let n = pixel_noise(o.texture_seed, px - cx, py - cy, 24);
                        rgb = Some([
                            (o.color[0] as i64 + n).clamp(0, 255) as u8,
                            (o.color[1] as i64 + n).clamp(0, 255) as u8,
                            (o.color[2] as i64 + n).clamp(0, 255) as u8,
                        ]);
                        break;
                    }
                }
                let covered = rgb.is_some();
                let rgb = rgb.unwrap_or_else(|| {
                    let n = pixel_noise(bg_seed, px + drift_x, py + drift_y, 20);
                    let v = (110 + n).clamp(0, 255) as u8;
                    [v, v, v]
                });
                let pix = (py as usize) * w + px as usize;
                for c in 0..3 {
                    frames[((ti * 3 + c) * h * w) + pix] = rgb[c] as f32 / 255.0;
                }
                if covered {
                    masks[ti * h * w + pix] = 1.0;
                }
            }
        }
    }

    Ok(ClipSample {
        frames: Tensor::new(&[t, 3, h, w], frames),
        masks: Tensor::new(&[t, h, w], masks),
        clip_id: format!("clip{:08x}", cfg.seed),
    })
}

// ── PPM / PGM ──────────────────────────────────────────────────────

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(format!("{magic}\n{w} {h}\n255\n").as_bytes())
        .map_err(|e| Error::io(path, e))?;
    out.write_all(bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Write one RGB frame (values in [0,1], 3 x H x W planes) as binary PPM.
pub fn write_ppm(path: &Path, planes: &[f32], h: usize, w: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(h * w * 3);
    for pix in 0..h * w {
        for c in 0..3 {
            bytes.push((planes[c * h * w + pix] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_netpbm(path, "P6", w, h, &bytes)
}

/// Write one binary mask (values {0,1}) as binary PGM with values {0, 255}.
pub fn write_pgm(path: &Path, mask: &[f32], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = mask
        .iter()
        .map(|&v| if v >= 0.5 { 255u8 } else { 0u8 })
        .collect();
    write_netpbm(path, "P5", w, h, &bytes)
}

struct NetpbmImage {
    w: usize,
    h: usize,
    data: Vec<u8>,
}

fn read_netpbm(path: &Path, want_magic: &str, format: &'static str) -> Result<NetpbmImage> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::BadImage {
        format,
        path: path.to_path_buf(),
        message,
    };

    // header: magic, then three ASCII fields separated by whitespace,
    // `#` comments allowed, single whitespace byte before binary data
    let mut pos = 0usize;
    let mut next_token = |raw: &[u8]| -> Option<(usize, usize)> {
        let mut i = pos;
        loop {
            while i < raw.len() && raw[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < raw.len() && raw[i] == b'#' {
                while i < raw.len() && raw[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < raw.len() && !raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        pos = i;
        Some((start, i))
    };

    let (s, e) = next_token(&raw).ok_or_else(|| bad("missing magic".into()))?;
    let magic = std::str::from_utf8(&raw[s..e]).unwrap_or("");
    if magic != want_magic {
        return Err(bad(format!("magic {magic:?}, expected {want_magic:?}")));
    }
    let mut field = |name: &str| -> Result<usize> {
        let (s, e) = next_token(&raw).ok_or_else(|| bad(format!("missing {name}")))?;
        std::str::from_utf8(&raw[s..e])
            .ok()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("non-numeric {name}")))
    };
    let w = field("width")?;
    let h = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, only 255 supported")));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let channels = if want_magic == "P6" { 3 } else { 1 };
    let need = w * h * channels;
    if raw.len() < data_start || raw.len() - data_start != need {
        return Err(bad(format!(
            "payload of {} bytes, expected {need}",
            raw.len().saturating_sub(data_start)
        )));
    }
    Ok(NetpbmImage {
        w,
        h,
        data: raw[data_start..].to_vec(),
    })
}

// ── Dataset layout ─────────────────────────────────────────────────

/// Discovered clips under a dataset root, lexicographic order.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub clips: Vec<String>,
}

/// Write a clip under `<root>/<clip_id>/`.
pub fn save_clip(clip: &ClipSample, root: &Path) -> Result<()> {
    let (t, h, w) = clip.dims();
    let dir = root.join(&clip.clip_id);
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let plane = h * w;
    for ti in 0..t {
        let fpath = frames_dir.join(format!("{ti:05}.ppm"));
        write_ppm(&fpath, &clip.frames.data()[ti * 3 * plane..(ti + 1) * 3 * plane], h, w)?;
        let mpath = masks_dir.join(format!("{ti:05}.pgm"));
        write_pgm(&mpath, &clip.masks.data()[ti * plane..(ti + 1) * plane], h, w)?;
    }
    Ok(())
}

/// Index the clip directories under `root`. An existing but empty root
/// yields an empty index.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut clips = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            clips.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    clips.sort();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        clips,
    })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn load_clip(&self, clip_id: &str) -> Result<ClipSample> {
        let dir = self.root.join(clip_id);
        let frame_paths = sorted_files(&dir.join("frames"), clip_id)?;
        let mask_paths = sorted_files(&dir.join("masks"), clip_id)?;
        if frame_paths.len() != mask_paths.len() {
            return Err(Error::BadClip {
                clip: clip_id.into(),
                message: format!(
                    "{} frames but {} masks",
                    frame_paths.len(),
                    mask_paths.len()
                ),
            });
        }
        if frame_paths.is_empty() {
            return Err(Error::BadClip {
                clip: clip_id.into(),
                message: "no frames".into(),
            });
        }

        let mut frames: Vec<f32> = Vec::new();
        let mut masks: Vec<f32> = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for (fpath, mpath) in frame_paths.iter().zip(&mask_paths) {
            let img = read_netpbm(fpath, "P6", "PPM")?;
            let msk = read_netpbm(mpath, "P5", "PGM")?;
            match dims {
                None => dims = Some((img.h, img.w)),
                Some((h, w)) if h == img.h && w == img.w => {}
                Some((h, w)) => {
                    return Err(Error::BadClip {
                        clip: clip_id.into(),
                        message: format!(
                            "frame dimensions drift: {w}x{h} then {}x{}",
                            img.w, img.h
                        ),
                    })
                }
            }
            let (h, w) = (img.h, img.w);
            if msk.h != h || msk.w != w {
                return Err(Error::BadClip {
                    clip: clip_id.into(),
                    message: format!("mask {}x{} does not match frame {w}x{h}", msk.w, msk.h),
                });
            }
            // interleaved RGB -> planar
            let plane = h * w;
            let base = frames.len();
            frames.resize(base + 3 * plane, 0.0);
            for pix in 0..plane {
                for c in 0..3 {
                    frames[base + c * plane + pix] = img.data[pix * 3 + c] as f32 / 255.0;
                }
            }
            masks.extend(msk.data.iter().map(|&b| if b > 127 { 1.0f32 } else { 0.0 }));
        }
        let t = frame_paths.len();
        let (h, w) = dims.unwrap();
        Ok(ClipSample {
            frames: Tensor::new(&[t, 3, h, w], frames),
            masks: Tensor::new(&[t, h, w], masks),
            clip_id: clip_id.into(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<ClipSample>> {
        self.clips.iter().map(|c| self.load_clip(c)).collect()
    }
}

fn sorted_files(dir: &Path, clip_id: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|_| Error::BadClip {
        clip: clip_id.into(),
        message: format!("missing directory {}", dir.display()),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    Ok(paths)
}
