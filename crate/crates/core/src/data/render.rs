//! Flat-colour shape rendering for synthetic scenes.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vision::ConceptMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether pixel `(dx, dy)` of a `size x size` box belongs to the shape.
    pub fn contains(self, size: u32, dx: u32, dy: u32) -> bool {
        let s = size as f64;
        let c = s / 2.0;
        let (x, y) = (dx as f64 + 0.5, dy as f64 + 0.5);
        match self {
            Shape::Square => true,
            Shape::Circle => (x - c).powi(2) + (y - c).powi(2) <= c * c,
            Shape::Diamond => (x - c).abs() + (y - c).abs() <= c,
            Shape::Triangle => (x - c).abs() <= y / s * c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

pub const CONCEPT_COLORS: [NamedColor; 4] = [
    NamedColor { name: "red", rgb: [255, 0, 0] },
    NamedColor { name: "blue", rgb: [0, 0, 255] },
    NamedColor { name: "green", rgb: [0, 255, 0] },
    NamedColor { name: "yellow", rgb: [255, 255, 0] },
];

/// Colours used only for distractor objects; none shares a histogram bin
/// with a concept colour.
pub const DISTRACTOR_COLORS: [NamedColor; 7] = [
    NamedColor { name: "cyan", rgb: [0, 255, 255] },
    NamedColor { name: "magenta", rgb: [255, 0, 255] },
    NamedColor { name: "orange", rgb: [255, 128, 0] },
    NamedColor { name: "purple", rgb: [128, 0, 128] },
    NamedColor { name: "white", rgb: [255, 255, 255] },
    NamedColor { name: "teal", rgb: [0, 128, 128] },
    NamedColor { name: "olive", rgb: [128, 128, 0] },
];

pub fn color_by_name(name: &str) -> Option<&'static NamedColor> {
    CONCEPT_COLORS.iter().chain(DISTRACTOR_COLORS.iter()).find(|c| c.name == name)
}

/// Axis-aligned placement of one drawn object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub x0: u32,
    pub y0: u32,
    pub size: u32,
}

impl Placement {
    pub fn center(&self) -> (f64, f64) {
        (self.x0 as f64 + self.size as f64 / 2.0, self.y0 as f64 + self.size as f64 / 2.0)
    }

    pub fn overlaps(&self, other: &Placement) -> bool {
        self.x0 < other.x0 + other.size
            && other.x0 < self.x0 + self.size
            && self.y0 < other.y0 + other.size
            && other.y0 < self.y0 + self.size
    }
}

/// Dark, low-saturation noisy backdrop; every channel stays at or below 122.
pub fn background<R: Rng>(rng: &mut R, width: u32, height: u32) -> RgbImage {
    let base: [i32; 3] = [rng.gen_range(24..=112), rng.gen_range(24..=112), rng.gen_range(24..=112)];
    RgbImage::from_fn(width, height, |_, _| {
        let mut px = [0u8; 3];
        for ch in 0..3 {
            px[ch] = (base[ch] + rng.gen_range(-10..=10)).clamp(0, 122) as u8;
        }
        Rgb(px)
    })
}

pub fn draw_shape(img: &mut RgbImage, mask: Option<&mut ConceptMask>, shape: Shape, color: [u8; 3], at: Placement) {
    let mut mask = mask;
    for dy in 0..at.size {
        for dx in 0..at.size {
            let (x, y) = (at.x0 + dx, at.y0 + dy);
            if x >= img.width() || y >= img.height() || !shape.contains(at.size, dx, dy) {
                continue;
            }
            img.put_pixel(x, y, Rgb(color));
            if let Some(m) = mask.as_deref_mut() {
                m.bits[(y * img.width() + x) as usize] = true;
            }
        }
    }
}

/// Random placement of a `size` box fully inside `[x_lo, x_hi) x [y_lo, y_hi)`.
pub fn place_in<R: Rng>(rng: &mut R, size: u32, x_lo: u32, x_hi: u32, y_lo: u32, y_hi: u32) -> Placement {
    let x_max = x_hi.saturating_sub(size).max(x_lo);
    let y_max = y_hi.saturating_sub(size).max(y_lo);
    Placement { x0: rng.gen_range(x_lo..=x_max), y0: rng.gen_range(y_lo..=y_max), size }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shapes_are_distinct_and_nonempty() {
        let mut areas = Vec::new();
        for s in Shape::ALL {
            let a: usize = (0..20).flat_map(|y| (0..20).map(move |x| (x, y))).filter(|&(x, y)| s.contains(20, x, y)).count();
            assert!(a > 100, "{s:?} too small");
            areas.push(a);
        }
        areas.dedup();
        assert_eq!(areas.len(), 4);
    }

    #[test]
    fn background_stays_in_dark_cell() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let bg = background(&mut rng, 16, 16);
        assert!(bg.pixels().all(|p| p.0.iter().all(|&c| c <= 122)));
    }

}
