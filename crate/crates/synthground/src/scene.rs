//! Scene descriptions and hard-edged rasterization.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    White,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 190, 60],
            Color::Blue => [40, 70, 230],
            Color::Yellow => [235, 220, 40],
            Color::Purple => [150, 50, 190],
            Color::White => [245, 245, 245],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Circumscribed radius in pixels at the given canvas resolution.
    pub fn radius(self, resolution: usize) -> u32 {
        let r = match self {
            Size::Small => resolution * 3 / 32,
            Size::Large => resolution * 5 / 32,
        };
        r.max(2) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: Size,
    /// Center in continuous pixel coordinates (pixel `x` spans `[x, x+1)`).
    pub cx: u32,
    pub cy: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub resolution: usize,
    pub objects: Vec<SceneObject>,
}

pub const BACKGROUND: [u8; 3] = [0, 0, 0];

impl SceneObject {
    /// Whether the pixel with top-left corner `(x, y)` is covered.
    /// Sampling happens at the pixel center. Every shape lies inside the
    /// circle of radius [`Size::radius`].
    pub fn covers(&self, x: usize, y: usize, resolution: usize) -> bool {
        let r = self.size.radius(resolution) as f64;
        let px = x as f64 + 0.5 - self.cx as f64;
        let py = y as f64 + 0.5 - self.cy as f64;
        match self.shape {
            ShapeKind::Circle => px * px + py * py <= r * r,
            ShapeKind::Square => {
                let half = r * 0.7;
                px.abs() <= half && py.abs() <= half
            }
            ShapeKind::Triangle => {
                // Upward equilateral triangle inscribed in the circle.
                let s = 3f64.sqrt() / 2.0;
                let v = [(0.0, -r), (-r * s, r * 0.5), (r * s, r * 0.5)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let e0 = edge(v[0], v[1]);
                let e1 = edge(v[1], v[2]);
                let e2 = edge(v[2], v[0]);
                (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0) || (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
            }
        }
    }

    pub fn mirrored(&self, resolution: usize) -> Self {
        SceneObject {
            cx: resolution as u32 - self.cx,
            ..*self
        }
    }
}

impl SceneSpec {
    /// Row-major binary mask of one object.
    pub fn object_mask(&self, index: usize) -> Vec<bool> {
        let n = self.resolution;
        let obj = &self.objects[index];
        let mut mask = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                mask[y * n + x] = obj.covers(x, y, n);
            }
        }
        mask
    }

    /// Interleaved RGB raster. Objects never overlap, so paint order is irrelevant.
    pub fn render(&self) -> Vec<u8> {
        let n = self.resolution;
        let mut img = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let rgb = self
                    .objects
                    .iter()
                    .find(|o| o.covers(x, y, n))
                    .map_or(BACKGROUND, |o| o.color.rgb());
                img.extend_from_slice(&rgb);
            }
        }
        img
    }
}

/// Tight normalized `(cx, cy, w, h)` box around the set pixels of a square mask.
pub fn mask_box(mask: &[bool], resolution: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % resolution, i / resolution);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x0 == usize::MAX {
        return None;
    }
    let n = resolution as f64;
    Some([
        (x0 + x1) as f64 / 2.0 / n,
        (y0 + y1) as f64 / 2.0 / n,
        (x1 - x0) as f64 / n,
        (y1 - y0) as f64 / n,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: ShapeKind, size: Size, cx: u32, cy: u32) -> SceneObject {
        SceneObject {
            shape,
            color: Color::Red,
            size,
            cx,
            cy,
        }
    }

    #[test]
    fn circle_box_is_symmetric_about_center() {
        let scene = SceneSpec {
            resolution: 64,
            objects: vec![obj(ShapeKind::Circle, Size::Small, 20, 30)],
        };
        let b = mask_box(&scene.object_mask(0), 64).unwrap();
        assert_eq!(b, [20.0 / 64.0, 30.0 / 64.0, 12.0 / 64.0, 12.0 / 64.0]);
    }

    #[test]
    fn shapes_stay_inside_their_radius() {
        for shape in ShapeKind::ALL {
            for size in Size::ALL {
                let o = obj(shape, size, 32, 32);
                let r = size.radius(64) as f64;
                for y in 0..64 {
                    for x in 0..64 {
                        if o.covers(x, y, 64) {
                            let dx = x as f64 + 0.5 - 32.0;
                            let dy = y as f64 + 0.5 - 32.0;
                            assert!(dx * dx + dy * dy <= r * r + 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mirroring_mirrors_the_mask() {
        for shape in ShapeKind::ALL {
            let o = obj(shape, Size::Large, 17, 40);
            let m = o.mirrored(64);
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(o.covers(x, y, 64), m.covers(63 - x, y, 64));
                }
            }
        }
    }
}
