//! Synthetic LArTPC-like event images: straight tracks and branching
//! electromagnetic showers on an empty canvas, optionally smeared by a
//! Gaussian diffusion kernel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use super::ImageGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Track,
    Shower,
    Mixed,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "track" => Ok(SynthKind::Track),
            "shower" => Ok(SynthKind::Shower),
            "mixed" => Ok(SynthKind::Mixed),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticleClass {
    Electron,
    Photon,
    Muon,
    Proton,
    ChargedPion,
}

impl ParticleClass {
    pub const ALL: [ParticleClass; 5] = [
        ParticleClass::Electron,
        ParticleClass::Photon,
        ParticleClass::Muon,
        ParticleClass::Proton,
        ParticleClass::ChargedPion,
    ];

    pub fn is_shower(self) -> bool {
        matches!(self, ParticleClass::Electron | ParticleClass::Photon)
    }
}

impl fmt::Display for ParticleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParticleClass::Electron => "electron",
            ParticleClass::Photon => "photon",
            ParticleClass::Muon => "muon",
            ParticleClass::Proton => "proton",
            ParticleClass::ChargedPion => "charged_pion",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub canvas: usize,
    pub count: usize,
    pub seed: u64,
    pub diffusion_sigma: f64,
    /// Upper bound of uniform positive background noise; 0 disables it.
    pub noise_floor: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Mixed,
            canvas: 256,
            count: 100,
            seed: 0,
            diffusion_sigma: 1.0,
            noise_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: ImageGrid,
    pub label: ParticleClass,
    /// Every straight segment `[r0, c0, r1, c1]` drawn, before any blur.
    pub segments: Vec<[f64; 4]>,
}

/// Pixels visited by a straight segment, one per step along its major axis.
pub fn rasterize_segment(r0: f64, c0: f64, r1: f64, c1: f64) -> Vec<(i64, i64)> {
    let steps = (r1 - r0).abs().max((c1 - c0).abs()).ceil().max(1.0) as usize;
    let mut out: Vec<(i64, i64)> = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let p = ((r0 + t * (r1 - r0)).round() as i64, (c0 + t * (c1 - c0)).round() as i64);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
    segments: Vec<[f64; 4]>,
}

impl Canvas {
    /// Deposits `intensity(t)` along the segment, `t` running 0 → 1.
    fn draw(&mut self, r0: f64, c0: f64, r1: f64, c1: f64, intensity: impl Fn(f64) -> f64) {
        self.segments.push([r0, c0, r1, c1]);
        let pts = rasterize_segment(r0, c0, r1, c1);
        let n = pts.len().max(2) - 1;
        for (i, &(r, c)) in pts.iter().enumerate() {
            if r >= 0 && c >= 0 && (r as usize) < self.size && (c as usize) < self.size {
                self.px[r as usize * self.size + c as usize] += intensity(i as f64 / n as f64);
            }
        }
    }
}

fn track(canvas: &mut Canvas, rng: &mut ChaCha8Rng, class: ParticleClass) {
    let s = canvas.size as f64;
    let (r0, c0) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let dir = rng.gen_range(0.0..2.0 * PI);
    let scale = s / 256.0;
    match class {
        ParticleClass::Proton => {
            // Short and heavily ionizing, brightest at the stopping point.
            let len = rng.gen_range(10.0..40.0) * scale;
            let base = rng.gen_range(60.0..100.0);
            canvas.draw(r0, c0, r0 + len * dir.sin(), c0 + len * dir.cos(), |t| base * (1.0 + 1.5 * t));
        }
        ParticleClass::ChargedPion => {
            let len = rng.gen_range(40.0..120.0) * scale;
            let base = rng.gen_range(40.0..80.0);
            let (r1, c1) = (r0 + len * dir.sin(), c0 + len * dir.cos());
            canvas.draw(r0, c0, r1, c1, |_| base);
            let kink = dir + rng.gen_range(-0.8..0.8);
            let len2 = rng.gen_range(20.0..80.0) * scale;
            canvas.draw(r1, c1, r1 + len2 * kink.sin(), c1 + len2 * kink.cos(), |_| base);
        }
        _ => {
            let len = rng.gen_range(60.0..200.0) * scale;
            let base = rng.gen_range(30.0..70.0);
            canvas.draw(r0, c0, r0 + len * dir.sin(), c0 + len * dir.cos(), |_| base);
        }
    }
}

fn shower(canvas: &mut Canvas, rng: &mut ChaCha8Rng, class: ParticleClass) {
    let s = canvas.size as f64;
    let (mut r, mut c) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let dir = rng.gen_range(0.0..2.0 * PI);
    if class == ParticleClass::Photon {
        // Photons convert some distance away from the vertex.
        let gap = rng.gen_range(5.0..30.0) * s / 256.0;
        r += gap * dir.sin();
        c += gap * dir.cos();
    }
    let len = rng.gen_range(20.0..50.0) * s / 256.0;
    let energy = rng.gen_range(80.0..160.0);
    branch(canvas, rng, (r, c), dir, len, energy, 0);
}

fn branch(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    dir: f64,
    len: f64,
    energy: f64,
    depth: usize,
) {
    let end = (start.0 + len * dir.sin(), start.1 + len * dir.cos());
    canvas.draw(start.0, start.1, end.0, end.1, |t| energy * (1.0 - 0.3 * t));
    if depth >= 4 || energy < 10.0 {
        return;
    }
    let children = if rng.gen_bool(0.75) { 2 } else { 1 };
    for _ in 0..children {
        let spread = rng.gen_range(0.1..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        branch(canvas, rng, end, dir + spread, len * 0.7, energy * 0.65, depth + 1);
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable blur with a normalized kernel; mass pushed past the border is
/// dropped.
fn blur(px: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let n = size as i64;
    let mut tmp = vec![0.0; px.len()];
    for r in 0..n {
        for c in 0..n {
            let v = px[(r * n + c) as usize];
            if v == 0.0 {
                continue;
            }
            for (j, w) in k.iter().enumerate() {
                let cc = c + j as i64 - radius;
                if (0..n).contains(&cc) {
                    tmp[(r * n + cc) as usize] += v * w;
                }
            }
        }
    }
    let mut out = vec![0.0; px.len()];
    for r in 0..n {
        for c in 0..n {
            let v = tmp[(r * n + c) as usize];
            if v == 0.0 {
                continue;
            }
            for (j, w) in k.iter().enumerate() {
                let rr = r + j as i64 - radius;
                if (0..n).contains(&rr) {
                    out[(rr * n + c) as usize] += v * w;
                }
            }
        }
    }
    out
}

/// Deterministic in all of `spec`'s fields.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    if !(spec.diffusion_sigma >= 0.0) || !(spec.noise_floor >= 0.0) {
        return Err(Error::Contract("diffusion_sigma and noise_floor must be >= 0".into()));
    }
    if spec.canvas == 0 {
        return Err(Error::dim("canvas must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let class = match spec.kind {
            SynthKind::Track => [ParticleClass::Muon, ParticleClass::Proton, ParticleClass::ChargedPion]
                [rng.gen_range(0..3)],
            SynthKind::Shower => [ParticleClass::Electron, ParticleClass::Photon][rng.gen_range(0..2)],
            SynthKind::Mixed => ParticleClass::ALL[rng.gen_range(0..5)],
        };
        let mut canvas = Canvas {
            size: spec.canvas,
            px: vec![0.0; spec.canvas * spec.canvas],
            segments: Vec::new(),
        };
        if class.is_shower() {
            shower(&mut canvas, &mut rng, class);
        } else {
            track(&mut canvas, &mut rng, class);
        }
        let mut px = if spec.diffusion_sigma > 0.0 {
            blur(&canvas.px, spec.canvas, spec.diffusion_sigma)
        } else {
            canvas.px.clone()
        };
        if spec.noise_floor > 0.0 {
            for p in px.iter_mut() {
                *p += rng.gen_range(0.0..spec.noise_floor);
            }
        }
        out.push(SynthImage {
            image: ImageGrid::new(spec.canvas, spec.canvas, px)?,
            label: class,
            segments: canvas.segments,
        });
    }
    Ok(out)
}
