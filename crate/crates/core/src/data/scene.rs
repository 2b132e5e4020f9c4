//! Face layout, the renderer, eye crops and the region split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::GazeAngles;
use crate::tensor::Tensor;

/// Largest absolute pitch or yaw the renderer accepts, in degrees.
pub const MAX_ANGLE_DEG: f64 = 25.0;
/// Half-width of the additive uniform pixel noise.
pub const NOISE_AMPLITUDE: f64 = 0.02;
/// Fraction of the sclera radius the pupil travels at ±25°.
pub const PUPIL_TRAVEL: f64 = 0.7;
const SUPERSAMPLE: usize = 4;

const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
const SKIN: [f64; 3] = [0.92, 0.74, 0.64];
const STROKE: [f64; 3] = [0.55, 0.33, 0.30];
// Red matches SKIN.
const SCLERA: [f64; 3] = [0.92, 0.93, 0.95];
const PUPIL: [f64; 3] = [0.08, 0.06, 0.05];

/// Axis-aligned pixel rectangle `[x0, x0 + w) × [y0, y0 + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EyeBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl EyeBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.w as f64 / 2.0,
            self.y0 as f64 + self.h as f64 / 2.0,
        )
    }
}

/// Where everything sits on an `H × W` face. Proportions are defined on a
/// 64×64 canvas and scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceGeometry {
    pub height: usize,
    pub width: usize,
    /// The eye on the image's left side.
    pub eye_l: EyeBox,
    pub eye_r: EyeBox,
    pub sclera_rx: f64,
    pub sclera_ry: f64,
    pub pupil_radius: f64,
    /// Pixels of pupil offset per unit `tan(angle)`.
    pub gain_x: f64,
    pub gain_y: f64,
}

impl FaceGeometry {
    pub fn new(height: usize, width: usize) -> Self {
        let sx = width as f64 / 64.0;
        let sy = height as f64 / 64.0;
        let bw = ((20.0 * sx).round() as usize).max(2);
        let bh = ((12.0 * sy).round() as usize).max(2);
        let place = |c: f64, extent: usize| (c - extent as f64 / 2.0).round().max(0.0) as usize;
        let y0 = place(26.0 * sy, bh);
        let eye_l = EyeBox {
            x0: place(20.0 * sx, bw),
            y0,
            w: bw,
            h: bh,
        };
        let eye_r = EyeBox {
            x0: place(44.0 * sx, bw),
            y0,
            w: bw,
            h: bh,
        };
        let sclera_rx = 0.4 * bw as f64;
        let sclera_ry = bh as f64 * 5.0 / 12.0;
        let tan_max = MAX_ANGLE_DEG.to_radians().tan();
        Self {
            height,
            width,
            eye_l,
            eye_r,
            sclera_rx,
            sclera_ry,
            pupil_radius: 0.3 * sclera_ry,
            gain_x: PUPIL_TRAVEL * sclera_rx / tan_max,
            gain_y: PUPIL_TRAVEL * sclera_ry / tan_max,
        }
    }

    pub fn boxes(&self) -> [EyeBox; 2] {
        [self.eye_l, self.eye_r]
    }

    /// Upper and lower row bounds `[r1, r2)` of the eye band.
    pub fn band(&self) -> (usize, usize) {
        let r1 = self.eye_l.y0.min(self.eye_r.y0);
        let r2 = (self.eye_l.y0 + self.eye_l.h).max(self.eye_r.y0 + self.eye_r.h);
        (r1, r2)
    }

    /// `[top, mid, bot]` extents `[rows, cols]`.
    pub fn region_sizes(&self) -> [[usize; 2]; 3] {
        let (r1, r2) = self.band();
        [
            [r1, self.width],
            [r2 - r1, self.width],
            [self.height - r2, self.width],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.boxes() {
            if b.x0 + b.w > self.width || b.y0 + b.h > self.height {
                return Err(Error::config(format!(
                    "eye box {b:?} leaves the {}x{} face",
                    self.height, self.width
                )));
            }
        }
        if self.eye_l.x0 + self.eye_l.w > self.eye_r.x0 {
            return Err(Error::config("eye boxes overlap"));
        }
        let (r1, r2) = self.band();
        if r1 == 0 || r2 >= self.height {
            return Err(Error::config("top and bottom regions must be non-empty"));
        }
        Ok(())
    }

    /// Pupil centre offset `(dx, dy)` in pixels; image `y` grows downward.
    pub fn pupil_offset(&self, truth: GazeAngles) -> (f64, f64) {
        (
            self.gain_x * truth.yaw.tan(),
            -self.gain_y * truth.pitch.tan(),
        )
    }

    fn face_center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// In-plane rotation by `angle` about `c`.
fn rotate(p: (f64, f64), c: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (p.0 - c.0, p.1 - c.1);
    (c.0 + co * dx - s * dy, c.1 + s * dx + co * dy)
}

fn in_ellipse(p: (f64, f64), c: (f64, f64), rx: f64, ry: f64) -> bool {
    let (u, v) = ((p.0 - c.0) / rx, (p.1 - c.1) / ry);
    u * u + v * v <= 1.0
}

fn near_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64), half_width: f64) -> bool {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    dx * dx + dy * dy <= half_width * half_width
}

/// Pixel colours before brightness and noise.
pub fn render_clean(geom: &FaceGeometry, truth: GazeAngles, roll: f64) -> Tensor {
    let (h, w) = (geom.height, geom.width);
    let (wf, hf) = (w as f64, h as f64);
    let center = geom.face_center();
    let (odx, ody) = geom.pupil_offset(truth);
    let eyes = geom.boxes().map(|b| b.center());
    let pupils = eyes.map(|e| {
        let r = rotate(e, center, roll);
        (r.0 + odx, r.1 + ody)
    });
    let nose = ((wf / 2.0, 0.5 * hf), (wf / 2.0, 0.64 * hf), 0.02 * wf);
    let mouth = ((0.4 * wf, 0.77 * hf), (0.6 * wf, 0.77 * hf), 0.02 * hf);
    let pr = geom.pupil_radius;

    let colour_at = |p: (f64, f64)| -> [f64; 3] {
        let (dx, dy) = (p.0 - pupils[0].0, p.1 - pupils[0].1);
        let (ex, ey) = (p.0 - pupils[1].0, p.1 - pupils[1].1);
        if dx * dx + dy * dy <= pr * pr || ex * ex + ey * ey <= pr * pr {
            return PUPIL;
        }
        // Everything else is laid out in the head frame.
        let q = rotate(p, center, -roll);
        if eyes
            .iter()
            .any(|&e| in_ellipse(q, e, geom.sclera_rx, geom.sclera_ry))
        {
            return SCLERA;
        }
        if !in_ellipse(q, center, 0.4 * wf, 0.46 * hf) {
            return BACKGROUND;
        }
        if near_segment(q, nose.0, nose.1, nose.2) || near_segment(q, mouth.0, mouth.1, mouth.2) {
            return STROKE;
        }
        SKIN
    };

    let mut out = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = (
                        x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    );
                    let c = colour_at(p);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                data[ch * plane + y * w + x] = acc[ch] / n;
            }
        }
    }
    out
}

/// Renders a `[3, H, W]` face in `[0, 1]`. `roll` is in radians; the noise
/// is drawn from `seed`, so identical arguments give identical images.
pub fn render_scene(
    geom: &FaceGeometry,
    seed: u64,
    truth: GazeAngles,
    brightness: f64,
    roll: f64,
) -> Result<Tensor> {
    let limit = MAX_ANGLE_DEG.to_radians() + 1e-12;
    if truth.pitch.abs() > limit || truth.yaw.abs() > limit {
        return Err(Error::config(format!(
            "gaze ({:.2}°, {:.2}°) outside ±{MAX_ANGLE_DEG}°",
            truth.pitch.to_degrees(),
            truth.yaw.to_degrees()
        )));
    }
    let mut img = render_clean(geom, truth, roll);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in img.data_mut() {
        let noise = rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
        *v = (*v * brightness + noise).clamp(0.0, 1.0);
    }
    Ok(img)
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::dim(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Exact copy of the pixels under `b`.
pub fn crop_box(face: &Tensor, b: EyeBox) -> Result<Tensor> {
    let [c, h, w] = dims3(face)?;
    if b.x0 + b.w > w || b.y0 + b.h > h {
        return Err(Error::dim(format!("box {b:?} outside a {h}x{w} image")));
    }
    let d = face.data();
    let mut out = Vec::with_capacity(c * b.w * b.h);
    for ch in 0..c {
        for y in b.y0..b.y0 + b.h {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&d[row + b.x0..row + b.x0 + b.w]);
        }
    }
    Tensor::new(&[c, b.h, b.w], out)
}

/// Copies `patch` back under `b`.
pub fn paste_box(face: &mut Tensor, b: EyeBox, patch: &Tensor) -> Result<()> {
    let [c, h, w] = dims3(face)?;
    if patch.shape() != [c, b.h, b.w] || b.x0 + b.w > w || b.y0 + b.h > h {
        return Err(Error::dim(format!(
            "patch {:?} does not fit box {b:?} of a {h}x{w} image",
            patch.shape()
        )));
    }
    let src = patch.data();
    let dst = face.data_mut();
    for ch in 0..c {
        for (r, y) in (b.y0..b.y0 + b.h).enumerate() {
            let row = ch * h * w + y * w;
            dst[row + b.x0..row + b.x0 + b.w]
                .copy_from_slice(&src[(ch * b.h + r) * b.w..(ch * b.h + r + 1) * b.w]);
        }
    }
    Ok(())
}

/// Both eye crops at `[eye_h, eye_w]`, resized bilinearly when the boxes
/// differ from the target extent.
pub fn crop_eyes(
    face: &Tensor,
    geom: &FaceGeometry,
    eye_size: [usize; 2],
) -> Result<(Tensor, Tensor)> {
    let crop = |b: EyeBox| -> Result<Tensor> {
        let patch = crop_box(face, b)?;
        if [b.h, b.w] == eye_size {
            Ok(patch)
        } else {
            patch.resize_bilinear(eye_size[0], eye_size[1])
        }
    };
    Ok((crop(geom.eye_l)?, crop(geom.eye_r)?))
}

fn rows(face: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(face)?;
    let d = face.data();
    let mut out = Vec::with_capacity(c * (r1 - r0) * w);
    for ch in 0..c {
        out.extend_from_slice(&d[ch * h * w + r0 * w..ch * h * w + r1 * w]);
    }
    Tensor::new(&[c, r1 - r0, w], out)
}

/// `top = rows [0, r1)`, `mid = rows [r1, r2)` with both eye boxes zeroed,
/// `bot = rows [r2, H)`.
pub fn region_split(face: &Tensor, geom: &FaceGeometry) -> Result<[Tensor; 3]> {
    let [_, h, w] = dims3(face)?;
    if (h, w) != (geom.height, geom.width) {
        return Err(Error::dim(format!(
            "face {h}x{w} does not match geometry {}x{}",
            geom.height, geom.width
        )));
    }
    let (r1, r2) = geom.band();
    let top = rows(face, 0, r1)?;
    let mut mid = rows(face, r1, r2)?;
    let band_h = r2 - r1;
    let md = mid.data_mut();
    for b in geom.boxes() {
        for ch in 0..3 {
            for y in b.y0..b.y0 + b.h {
                let row = ch * band_h * w + (y - r1) * w;
                md[row + b.x0..row + b.x0 + b.w].fill(0.0);
            }
        }
    }
    let bot = rows(face, r2, h)?;
    Ok([top, mid, bot])
}

/// Inverse of [`region_split`] given the native-resolution eye crops.
pub fn reassemble(
    regions: &[Tensor; 3],
    eyes_native: (&Tensor, &Tensor),
    geom: &FaceGeometry,
) -> Result<Tensor> {
    let (h, w) = (geom.height, geom.width);
    let mut face = Tensor::zeros(&[3, h, w]);
    let mut row = 0;
    for r in regions {
        let [c, rh, rw] = dims3(r)?;
        if c != 3 || rw != w || row + rh > h {
            return Err(Error::dim(format!(
                "region {:?} does not tile a {h}x{w} face",
                r.shape()
            )));
        }
        let d = face.data_mut();
        for ch in 0..3 {
            d[ch * h * w + row * w..ch * h * w + (row + rh) * w]
                .copy_from_slice(&r.data()[ch * rh * w..(ch + 1) * rh * w]);
        }
        row += rh;
    }
    if row != h {
        return Err(Error::dim(format!("regions cover {row} of {h} rows")));
    }
    paste_box(&mut face, geom.eye_l, eyes_native.0)?;
    paste_box(&mut face, geom.eye_r, eyes_native.1)?;
    Ok(face)
}

/// Coverage-weighted pupil centre inside `b`, read from the red channel.
pub fn pupil_centroid(face: &Tensor, b: EyeBox) -> Result<(f64, f64)> {
    let [_, h, w] = dims3(face)?;
    let red = &face.data()[..h * w];
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in b.y0..b.y0 + b.h {
        for x in b.x0..b.x0 + b.w {
            let cover = ((SKIN[0] - red[y * w + x]) / (SKIN[0] - PUPIL[0])).clamp(0.0, 1.0);
            sw += cover;
            sx += cover * (x as f64 + 0.5);
            sy += cover * (y as f64 + 0.5);
        }
    }
    if sw == 0.0 {
        return Err(Error::Metric(format!("no pupil found in {b:?}")));
    }
    Ok((sx / sw, sy / sw))
}

/// Geometric gaze estimate from an unrolled, un-noised render: the mean
/// pupil displacement of both eyes, inverted through the renderer's gains.
pub fn estimate_gaze(face: &Tensor, geom: &FaceGeometry) -> Result<GazeAngles> {
    let (mut dx, mut dy) = (0.0, 0.0);
    for b in geom.boxes() {
        let (px, py) = pupil_centroid(face, b)?;
        let (cx, cy) = b.center();
        dx += (px - cx) / 2.0;
        dy += (py - cy) / 2.0;
    }
    Ok(GazeAngles::new(
        (-dy / geom.gain_y).atan(),
        (dx / geom.gain_x).atan(),
    ))
}
