//! Seeded synthetic images that look vaguely like interior photographs:
//! gradient walls and floor, furniture rectangles, a window grid, striped
//! and checkered textures and soft light blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::{Image, ImagePair};
use crate::models::SCALE;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, mut color: impl FnMut(usize, usize) -> [f64; 3]) {
        for y in y0.min(self.h)..y1.min(self.h) {
            for x in x0.min(self.w)..x1.min(self.w) {
                self.px[y * self.w + x] = color(x, y);
            }
        }
    }

    fn into_image(self) -> Result<Image> {
        let data = self
            .px
            .iter()
            .flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8))
            .collect();
        Image::new(self.w, self.h, data)
    }
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn shade(c: [f64; 3], f: f64) -> [f64; 3] {
    c.map(|v| v * f)
}

/// A `width × height` synthetic room.
pub fn room_image(width: usize, height: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Canvas {
        w: width,
        h: height,
        px: vec![[0.0; 3]; width * height],
    };
    let (w, h) = (width as f64, height as f64);

    let horizon = rng.random_range(0.55..0.75) * h;
    let wall = random_color(&mut rng, 120.0, 230.0);
    let floor = random_color(&mut rng, 60.0, 160.0);
    c.fill_rect(0, 0, width, height, |x, y| {
        let (xf, yf) = (x as f64 / w, y as f64);
        if yf < horizon {
            shade(wall, 0.8 + 0.25 * xf)
        } else {
            shade(floor, 0.7 + 0.4 * (yf - horizon) / (h - horizon))
        }
    });

    // Floor boards.
    let board = rng.random_range(3..7usize);
    let top = horizon.ceil() as usize;
    c.fill_rect(0, top, width, height, |x, y| {
        let base = shade(floor, 0.7 + 0.4 * (y as f64 - horizon) / (h - horizon));
        if (x / board) % 2 == 0 {
            shade(base, 0.85)
        } else {
            base
        }
    });

    // Window with mullions.
    let ww = (rng.random_range(0.2..0.35) * w) as usize;
    let wh = (rng.random_range(0.25..0.4) * h) as usize;
    let wx = rng.random_range(0..width.saturating_sub(ww).max(1));
    let wy = rng.random_range(0..(horizon as usize).saturating_sub(wh).max(1));
    let panes = rng.random_range(2..4usize);
    let sky = random_color(&mut rng, 180.0, 255.0);
    c.fill_rect(wx, wy, wx + ww, wy + wh, |x, y| {
        let (lx, ly) = (x - wx, y - wy);
        let mullion = lx % (ww / panes).max(2) == 0 || ly % (wh / panes).max(2) == 0;
        if mullion || lx + 1 == ww || ly + 1 == wh {
            [250.0, 250.0, 245.0]
        } else {
            shade(sky, 1.0 - 0.3 * ly as f64 / wh as f64)
        }
    });

    // Furniture: rectangles with striped or checkered upholstery.
    for _ in 0..rng.random_range(2..5) {
        let fw = (rng.random_range(0.15..0.4) * w) as usize;
        let fh = (rng.random_range(0.1..0.3) * h) as usize;
        let fx = rng.random_range(0..width.saturating_sub(fw).max(1));
        let fy = rng.random_range((horizon as usize).saturating_sub(fh / 2)..height.saturating_sub(fh).max(horizon as usize + 1));
        let color = random_color(&mut rng, 20.0, 200.0);
        let alt = random_color(&mut rng, 20.0, 200.0);
        let period = rng.random_range(2..6usize);
        let checker = rng.random_bool(0.5);
        c.fill_rect(fx, fy, fx + fw, fy + fh, |x, y| {
            let on = if checker {
                ((x / period) + (y / period)) % 2 == 0
            } else {
                (x + y) / period % 2 == 0
            };
            let edge = x == fx || y == fy || x + 1 == fx + fw || y + 1 == fy + fh;
            if edge {
                shade(color, 0.4)
            } else if on {
                color
            } else {
                alt
            }
        });
    }

    // Soft lights.
    for _ in 0..rng.random_range(1..3) {
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..horizon));
        let sigma = rng.random_range(0.05..0.15) * w;
        let gain = rng.random_range(30.0..70.0);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = gain * (-d2 / (2.0 * sigma * sigma)).exp();
                for v in &mut c.px[y * width + x] {
                    *v += g;
                }
            }
        }
    }
    c.into_image()
}

/// `count` pairs of `lr_size` LR images with bicubically induced LR.
pub fn synthetic_pairs(count: usize, lr_size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    (0..count)
        .map(|i| {
            let hr = room_image(SCALE * lr_size, SCALE * lr_size, seed.wrapping_add(i as u64))?;
            ImagePair::from_hr(format!("room{i:03}"), hr)
        })
        .collect()
}
