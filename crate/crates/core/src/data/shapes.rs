//! Colored-shape scenes with compositional captions.

use rand::Rng;
use serde::{Deserialize, Serialize};

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(&self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

word_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
word_enum!(Color {
    Red => "red", Green => "green", Blue => "blue", Yellow => "yellow",
    Cyan => "cyan", Magenta => "magenta", White => "white", Orange => "orange",
});
word_enum!(Position {
    TopLeft => "top-left", Top => "top", TopRight => "top-right",
    Left => "left", Center => "center", Right => "right",
    BottomLeft => "bottom-left", Bottom => "bottom", BottomRight => "bottom-right",
});
word_enum!(Size { Small => "small", Large => "large" });

impl Color {
    pub fn rgb(&self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }
}

impl Position {
    /// `(column, row)` of the 3x3 grid cell.
    pub fn cell(&self) -> (usize, usize) {
        let i = Position::ALL.iter().position(|p| p == self).expect("listed");
        (i % 3, i / 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: Size,
}

impl ShapeSpec {
    pub fn caption(&self) -> String {
        format!("a {} {} {} at {}", self.size.word(), self.color.word(), self.shape.word(), self.position.word())
    }

    /// Inverse of [`ShapeSpec::caption`].
    pub fn parse(caption: &str) -> Option<Self> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        match words.as_slice() {
            ["a", size, color, shape, "at", position] => Some(Self {
                shape: Shape::from_word(shape)?,
                color: Color::from_word(color)?,
                position: Position::from_word(position)?,
                size: Size::from_word(size)?,
            }),
            _ => None,
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            position: Position::ALL[rng.random_range(0..Position::ALL.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
        }
    }

    /// Every combination, in a fixed order.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::new();
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &position in Position::ALL {
                    for &size in Size::ALL {
                        out.push(Self { shape, color, position, size });
                    }
                }
            }
        }
        out
    }

    fn contains(&self, dx: f32, dy: f32, r: f32) -> bool {
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Triangle => {
                // apex up, base at dy = r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= r * t
            }
        }
    }

    /// Renders onto a black `size x size` canvas, CHW in `[0, 1]`, with 4x4
    /// supersampling. `jitter` shifts the shape centre in pixels.
    pub fn render(&self, size: usize, jitter: (i32, i32)) -> Vec<f32> {
        let cell = size as f32 / 3.0;
        let (col, row) = self.position.cell();
        let cx = (col as f32 + 0.5) * cell + jitter.0 as f32;
        let cy = (row as f32 + 0.5) * cell + jitter.1 as f32;
        let r = match self.size {
            Size::Small => cell * 0.3,
            Size::Large => cell * 0.48,
        };
        let rgb = self.color.rgb();
        let plane = size * size;
        let mut out = vec![0.0f32; 3 * plane];
        const SS: usize = 4;
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                        let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                        if self.contains(px - cx, py - cy, r) {
                            hits += 1;
                        }
                    }
                }
                let cover = hits as f32 / (SS * SS) as f32;
                for (c, &v) in rgb.iter().enumerate() {
                    out[c * plane + y * size + x] = v * cover;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_grammar_is_bijective() {
        let all = ShapeSpec::all();
        assert_eq!(all.len(), 3 * 8 * 9 * 2);
        let mut captions = std::collections::HashSet::new();
        for spec in &all {
            let c = spec.caption();
            assert_eq!(ShapeSpec::parse(&c), Some(*spec));
            assert!(captions.insert(c));
        }
        assert_eq!(ShapeSpec::parse("a huge red circle at top"), None);
    }

    #[test]
    fn render_places_shape_in_its_cell() {
        let spec = ShapeSpec { shape: Shape::Square, color: Color::Red, position: Position::BottomRight, size: Size::Large };
        let img = spec.render(16, (0, 0));
        let red = &img[..256];
        let mass: f32 = red.iter().sum();
        let (mut mx, mut my) = (0.0, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                mx += red[y * 16 + x] * x as f32;
                my += red[y * 16 + x] * y as f32;
            }
        }
        assert!(mass > 4.0);
        assert!(mx / mass > 10.0 && my / mass > 10.0);
        assert!(img[256..].iter().all(|&v| v == 0.0));
    }
}
