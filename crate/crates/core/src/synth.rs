//! Procedural sprite talking-head clips with known ground truth.
//!
//! A sprite face is a filled head ellipse on a mid-gray background with two
//! eye dots and a mouth ellipse whose vertical radius is proportional to the
//! mouth aperture. Rasterization is hard-edged (a pixel is filled iff its
//! center lies inside the shape), which makes dark-pixel counts an exact
//! oracle for the rendered aperture. The mouth aperture of every frame
//! equals the clip's speech envelope by construction, giving the pipeline a
//! known speech-to-mouth link to recover.

use crate::error::{CoreError, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const CANVAS: usize = 32;

/// Background gray. Chosen mid-range so an untrained decoder (which emits
/// ~0.5 everywhere) starts near the dataset mean.
pub const BG_GRAY: f32 = 0.5;
/// Eye and mouth fill.
pub const MARK_GRAY: f32 = 0.08;
/// Pixels below this count as "dark" when measuring the mouth.
pub const DARK_THRESHOLD: f32 = 0.3;

pub const MOUTH_RX: f64 = 5.8;
pub const MOUTH_RY_MAX: f64 = 3.4;
pub const EYE_OFFSET: f64 = 4.5;
pub const EYE_RADIUS: f64 = 1.35;

pub const POSE_MAX_SHIFT: f64 = 2.0;
pub const POSE_MAX_ROT: f64 = 0.10;

/// One rendered identity. Geometry ranges keep the face inside the canvas
/// at maximal pose offsets and all marks inside the head ellipse. The mouth
/// offset is quantized to quarter-integers: pixel rows then sit at the
/// asymmetric distances {0.25, 0.75, 1.25, ...} from the mouth center, so
/// rows enter the growing mouth ellipse one at a time with width starting
/// at zero. That keeps the dark-pixel count a nearly strictly increasing
/// function of aperture, which the measurement inverts.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteIdentity {
    /// Head semi-axes, sampled from [8.4, 9.5] x [10.5, 11.5].
    pub head_rx: f64,
    pub head_ry: f64,
    /// Face fill, sampled from [0.65, 0.9].
    pub face_gray: f32,
    /// Eye half-spacing, sampled from [3, 5].
    pub eye_spacing: f64,
    /// Mouth center below head center, one of {5.25, 6.25}.
    pub mouth_offset: f64,
}

impl SpriteIdentity {
    pub fn sample(rng: &mut RandomSource) -> Self {
        Self {
            head_rx: rng.uniform_in(8.4, 9.5),
            head_ry: rng.uniform_in(10.5, 11.5),
            face_gray: rng.uniform_in(0.65, 0.9) as f32,
            eye_spacing: rng.uniform_in(3.0, 5.0),
            mouth_offset: if rng.bernoulli(0.5) { 5.25 } else { 6.25 },
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::sample(&mut RandomSource::derive(seed, 0x1d_e11))
    }

    /// Worst-case head extent under the pose limits stays inside the canvas
    /// and every mark stays inside the head.
    pub fn validate(&self) -> Result<()> {
        let (s, c) = (POSE_MAX_ROT.sin().abs(), POSE_MAX_ROT.cos());
        let ext_x = self.head_rx * c + self.head_ry * s + POSE_MAX_SHIFT;
        let ext_y = self.head_ry * c + self.head_rx * s + POSE_MAX_SHIFT;
        let half = CANVAS as f64 / 2.0;
        if ext_x >= half || ext_y >= half {
            return Err(CoreError::InvalidArgument {
                what: "sprite identity",
                detail: format!("head extent ({ext_x:.2}, {ext_y:.2}) exceeds canvas"),
            });
        }
        // Full-aperture mouth boundary stays inside the head ellipse.
        for k in 0..=32 {
            let theta = std::f64::consts::TAU * k as f64 / 32.0;
            let u = MOUTH_RX * theta.cos();
            let v = self.mouth_offset + MOUTH_RY_MAX * theta.sin();
            if (u / self.head_rx).powi(2) + (v / self.head_ry).powi(2) > 1.0 {
                return Err(CoreError::InvalidArgument {
                    what: "sprite identity",
                    detail: "mouth extends past the head ellipse".into(),
                });
            }
        }
        if self.eye_spacing + EYE_RADIUS >= self.head_rx {
            return Err(CoreError::InvalidArgument {
                what: "sprite identity",
                detail: "eyes extend past the head ellipse".into(),
            });
        }
        Ok(())
    }
}

/// Head translation and rotation for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub rot: f64,
}

impl Pose {
    pub fn in_range(&self) -> bool {
        self.dx.abs() <= POSE_MAX_SHIFT
            && self.dy.abs() <= POSE_MAX_SHIFT
            && self.rot.abs() <= POSE_MAX_ROT
    }
}

/// 32x32 grayscale image in [0, 1].
pub type Image = Tensor<f32>;

/// Hard-edged rasterization of one frame.
pub fn render_sprite_frame(identity: &SpriteIdentity, pose: &Pose, aperture: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&aperture) {
        return Err(CoreError::InvalidArgument {
            what: "aperture",
            detail: format!("must lie in [0, 1], got {aperture}"),
        });
    }
    if !pose.in_range() {
        return Err(CoreError::InvalidArgument {
            what: "pose",
            detail: format!("{pose:?} exceeds documented ranges"),
        });
    }
    let cx = CANVAS as f64 / 2.0 + pose.dx;
    let cy = CANVAS as f64 / 2.0 + pose.dy;
    let (sin, cos) = (pose.rot.sin(), pose.rot.cos());
    // Rotate a canvas offset into the face frame.
    let to_face = |px: f64, py: f64| {
        let (ox, oy) = (px - cx, py - cy);
        (cos * ox + sin * oy, -sin * ox + cos * oy)
    };
    let in_ellipse = |u: f64, v: f64, rx: f64, ry: f64| {
        rx > 0.0 && ry > 0.0 && (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
    };
    let mouth_ry = aperture * MOUTH_RY_MAX;
    let mut data = vec![BG_GRAY; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let (u, v) = to_face(x as f64 + 0.5, y as f64 + 0.5);
            if !in_ellipse(u, v, identity.head_rx, identity.head_ry) {
                continue;
            }
            let mut val = identity.face_gray;
            for side in [-1.0, 1.0] {
                let (eu, ev) = (u - side * identity.eye_spacing, v + EYE_OFFSET);
                if eu * eu + ev * ev <= EYE_RADIUS * EYE_RADIUS {
                    val = MARK_GRAY;
                }
            }
            if in_ellipse(u, v - identity.mouth_offset, MOUTH_RX, mouth_ry) {
                val = MARK_GRAY;
            }
            data[y * CANVAS + x] = val;
        }
    }
    Tensor::from_vec(vec![CANVAS, CANVAS], data)
}

/// Neutral identity card: centered pose, closed mouth.
pub fn render_identity_image(identity: &SpriteIdentity) -> Image {
    render_sprite_frame(identity, &Pose::default(), 0.0).expect("neutral pose is in range")
}

// ── speech ───────────────────────────────────────────────────────────

/// Synthetic speech: a mouth-driving envelope plus a fixed lifting into
/// feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechTrack {
    /// Per-frame mouth drive in [0, 1].
    pub envelope: Vec<f32>,
    /// `[frames, dim]` feature lifting, channel layout per [`lift_envelope`].
    pub features: Tensor<f32>,
}

impl SpeechTrack {
    pub fn frames(&self) -> usize {
        self.envelope.len()
    }
}

/// Feature dimension used throughout the pipeline.
pub const SPEECH_DIM: usize = 8;

/// Random envelope: the positive part of a sum of 2-4 random sinusoids,
/// normalized to peak at 1.
pub fn synth_envelope(rng: &mut RandomSource, frames: usize) -> Vec<f32> {
    let n_sin = 2 + rng.below(3);
    let components: Vec<(f64, f64, f64)> = (0..n_sin)
        .map(|_| {
            (
                rng.uniform_in(0.3, 1.0),                        // amplitude
                rng.uniform_in(0.5, 3.0) * std::f64::consts::TAU / 25.0, // rad per frame
                rng.uniform_in(0.0, std::f64::consts::TAU),      // phase
            )
        })
        .collect();
    let mut env: Vec<f64> = (0..frames)
        .map(|f| {
            components
                .iter()
                .map(|&(a, w, p)| a * (w * f as f64 + p).sin())
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let peak = env.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for e in &mut env {
            *e /= peak;
        }
    }
    env.into_iter().map(|e| e as f32).collect()
}

/// Deterministic lifting of an envelope into `dim` channels:
/// 0 the envelope itself, 1 its first difference, 2-3 sinusoidally warped
/// one- and two-frame lags, 4 a cosine warp, and 5+ seeded noise channels.
/// Channel 0 always recovers the envelope exactly.
pub fn lift_envelope(envelope: &[f32], dim: usize, rng: &mut RandomSource) -> Tensor<f32> {
    use std::f64::consts::PI;
    let frames = envelope.len();
    let lag = |f: usize, k: usize| if f >= k { envelope[f - k] as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(frames * dim);
    for f in 0..frames {
        for c in 0..dim {
            let v = match c {
                0 => envelope[f] as f64,
                1 => {
                    if f == 0 {
                        0.0
                    } else {
                        (envelope[f] - envelope[f - 1]) as f64
                    }
                }
                2 => (PI * lag(f, 1)).sin(),
                3 => (PI * lag(f, 2)).sin(),
                4 => (PI * envelope[f] as f64).cos(),
                _ => rng.normal() * 0.1,
            };
            data.push(v as f32);
        }
    }
    Tensor::from_vec(vec![frames, dim], data).expect("shape/data agree")
}

pub fn synth_speech_track(rng: &mut RandomSource, frames: usize) -> SpeechTrack {
    let envelope = synth_envelope(rng, frames);
    let features = lift_envelope(&envelope, SPEECH_DIM, rng);
    SpeechTrack { envelope, features }
}

/// Track built from a caller-supplied envelope (noise channels still take
/// their values from `rng`).
pub fn speech_track_from_envelope(envelope: Vec<f32>, rng: &mut RandomSource) -> SpeechTrack {
    let features = lift_envelope(&envelope, SPEECH_DIM, rng);
    SpeechTrack { envelope, features }
}

// ── clips ────────────────────────────────────────────────────────────

/// A rendered clip with full ground truth.
#[derive(Debug, Clone)]
pub struct ClipSample {
    pub identity: SpriteIdentity,
    pub frames: Vec<Image>,
    pub track: SpeechTrack,
    pub poses: Vec<Pose>,
    /// Equal to `track.envelope` by construction.
    pub apertures: Vec<f32>,
}

/// Bounded smoothed random walk over (dx, dy, rot). The per-clip `scale`
/// spreads motion intensity across clips so sequence statistics vary.
fn pose_walk(rng: &mut RandomSource, frames: usize) -> Vec<Pose> {
    let scale = rng.uniform_in(0.25, 1.0);
    let clamp = |v: f64, m: f64| v.max(-m).min(m);
    let mut p = Pose {
        dx: rng.uniform_in(-1.0, 1.0) * scale,
        dy: rng.uniform_in(-1.0, 1.0) * scale,
        rot: rng.uniform_in(-0.05, 0.05) * scale,
    };
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(p);
        p = Pose {
            dx: clamp(p.dx + scale * 0.35 * rng.normal(), POSE_MAX_SHIFT),
            dy: clamp(p.dy + scale * 0.35 * rng.normal(), POSE_MAX_SHIFT),
            rot: clamp(p.rot + scale * 0.03 * rng.normal(), POSE_MAX_ROT),
        };
    }
    out
}

/// Clip from an existing identity and a motion/speech random source.
pub fn make_clip_for(
    identity: &SpriteIdentity,
    rng: &mut RandomSource,
    frames: usize,
) -> ClipSample {
    let track = synth_speech_track(rng, frames);
    let poses = pose_walk(rng, frames);
    let apertures = track.envelope.clone();
    let rendered = poses
        .iter()
        .zip(&apertures)
        .map(|(pose, &a)| {
            render_sprite_frame(identity, pose, a as f64).expect("walk stays in range")
        })
        .collect();
    ClipSample {
        identity: identity.clone(),
        frames: rendered,
        track,
        poses,
        apertures,
    }
}

/// Clip with identity and motion drawn from one source.
pub fn make_clip(rng: &mut RandomSource, frames: usize) -> ClipSample {
    let identity = SpriteIdentity::sample(rng);
    make_clip_for(&identity, rng, frames)
}

// ── aperture measurement ─────────────────────────────────────────────

/// Count dark pixels inside an axis-aligned box.
fn dark_count(image: &Image, x0: f64, x1: f64, y0: f64, y1: f64) -> usize {
    let mut n = 0;
    for y in 0..CANVAS {
        let py = y as f64 + 0.5;
        if py < y0 || py > y1 {
            continue;
        }
        for x in 0..CANVAS {
            let px = x as f64 + 0.5;
            if px < x0 || px > x1 {
                continue;
            }
            if image.data()[y * CANVAS + x] < DARK_THRESHOLD {
                n += 1;
            }
        }
    }
    n
}

/// Aperture measurement for one identity.
///
/// The statistic is the dark-pixel count of the mouth region normalized by
/// the full-aperture count. Hard-edged rasterization makes that fraction a
/// monotone step function of aperture rather than the identity line, so the
/// observed fraction is inverted through the identity's own response curve
/// (101 neutral-pose renders, computed once per meter); flat runs resolve
/// to their midpoint.
#[derive(Debug, Clone)]
pub struct ApertureMeter {
    identity: SpriteIdentity,
    full_count: usize,
    curve: Vec<f64>,
}

const MOUTH_BOX_PAD: f64 = 2.5;

impl ApertureMeter {
    pub fn new(identity: &SpriteIdentity) -> Self {
        let half = CANVAS as f64 / 2.0;
        let reference = render_sprite_frame(identity, &Pose::default(), 1.0)
            .expect("neutral pose is in range");
        let full_count = dark_count(
            &reference,
            half - MOUTH_RX - MOUTH_BOX_PAD,
            half + MOUTH_RX + MOUTH_BOX_PAD,
            half + identity.mouth_offset - MOUTH_RY_MAX - MOUTH_BOX_PAD,
            half + identity.mouth_offset + MOUTH_RY_MAX + MOUTH_BOX_PAD,
        );
        let mut meter = Self {
            identity: identity.clone(),
            full_count,
            curve: Vec::new(),
        };
        meter.curve = (0..=100)
            .map(|i| {
                let a = i as f64 / 100.0;
                let img = render_sprite_frame(identity, &Pose::default(), a)
                    .expect("neutral pose is in range");
                meter.fraction(&img)
            })
            .collect();
        meter
    }

    /// Mouth dark-pixel fraction in [0, 1]. Head translation is estimated
    /// from the centroid of non-background pixels; the mouth region is a
    /// padded box at the identity's mouth offset below that center.
    fn fraction(&self, image: &Image) -> f64 {
        let half = CANVAS as f64 / 2.0;
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if (image.data()[y * CANVAS + x] - BG_GRAY).abs() > 0.08 {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        let (cx, cy) = if n > 0 {
            (sx / n as f64, sy / n as f64)
        } else {
            (half, half)
        };
        let mouth_y = cy + self.identity.mouth_offset;
        let count = dark_count(
            image,
            cx - MOUTH_RX - MOUTH_BOX_PAD,
            cx + MOUTH_RX + MOUTH_BOX_PAD,
            mouth_y - MOUTH_RY_MAX - MOUTH_BOX_PAD,
            mouth_y + MOUTH_RY_MAX + MOUTH_BOX_PAD,
        );
        if self.full_count == 0 {
            return 0.0;
        }
        (count as f64 / self.full_count as f64).clamp(0.0, 1.0)
    }

    /// Recover the aperture of a rendered (or decoded) frame; in [0, 1].
    /// A zero count reads as fully closed, a saturated count as fully open.
    pub fn measure(&self, image: &Image) -> f64 {
        let observed = self.fraction(image);
        if observed == 0.0 {
            return 0.0;
        }
        if observed >= 1.0 {
            return 1.0;
        }
        let best = self
            .curve
            .iter()
            .map(|&f| (f - observed).abs())
            .fold(f64::INFINITY, f64::min);
        let mut lo = usize::MAX;
        let mut hi = 0;
        for (i, &f) in self.curve.iter().enumerate() {
            if ((f - observed).abs() - best).abs() < 1e-12 {
                lo = lo.min(i);
                hi = hi.max(i);
            }
        }
        (lo + hi) as f64 / 200.0
    }
}

/// One-shot aperture measurement; builds and discards the meter.
pub fn measure_aperture(image: &Image, identity: &SpriteIdentity) -> f64 {
    ApertureMeter::new(identity).measure(image)
}
