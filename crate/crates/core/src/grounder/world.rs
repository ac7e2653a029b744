//! Grid scenes of simple objects and their symbolic region features.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GrounderError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Big,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Big];
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Big => "big",
        }
    }
}

/// Axis-aligned box in pixels, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GrounderError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(GrounderError::DegenerateBox(*bx));
        }
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub row: usize,
    pub col: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_item: Option<usize>,
}

/// Partial description: shape always, size and colour optional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Description {
    pub shape: Shape,
    pub color: Option<Color>,
    pub size: Option<Size>,
}

impl Description {
    pub fn full(o: &Object) -> Self {
        Description { shape: o.shape, color: Some(o.color), size: Some(o.size) }
    }

    pub fn matches(&self, o: &Object) -> bool {
        self.shape == o.shape && self.color.map_or(true, |c| c == o.color) && self.size.map_or(true, |s| s == o.size)
    }

    /// `[size] [color] shape`.
    pub fn words(&self) -> Vec<&'static str> {
        let mut out = Vec::with_capacity(3);
        if let Some(s) = self.size {
            out.push(s.word());
        }
        if let Some(c) = self.color {
            out.push(c.word());
        }
        out.push(self.shape.word());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Holding,
}

impl Relation {
    pub const ALL: [Relation; 5] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below, Relation::Holding];

    /// Surface words, e.g. `["left", "of"]`.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
            Relation::Holding => &["holding"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub grid: usize,
    pub cell_px: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance that an object holds an adjacent, not yet held object.
    pub hold_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { grid: 6, cell_px: 16, min_objects: 8, max_objects: 12, hold_prob: 0.3 }
    }
}

impl WorldConfig {
    /// Own attributes, grid position, holding flags, then five context slots
    /// (left, right, above and below neighbours, held item) of 9 one-hots each.
    pub fn feature_dim(&self) -> usize {
        ATTR_DIM + 2 * self.grid + 2 + 5 * ATTR_DIM
    }

    pub fn validate(&self) -> Result<(), GrounderError> {
        if self.grid == 0 || self.cell_px < 8 || self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 12 || self.max_objects > self.grid * self.grid {
            return Err(GrounderError::Config(format!("invalid world config {self:?}")));
        }
        Ok(())
    }
}

const ATTR_DIM: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub cell_px: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn generate<R: Rng + ?Sized>(config: &WorldConfig, rng: &mut R) -> Self {
        let n = rng.gen_range(config.min_objects..=config.max_objects);
        let mut cells: Vec<(usize, usize)> = (0..config.grid).flat_map(|r| (0..config.grid).map(move |c| (r, c))).collect();
        cells.shuffle(rng);
        let mut objects: Vec<Object> = cells[..n]
            .iter()
            .enumerate()
            .map(|(id, &(row, col))| Object {
                id,
                shape: *Shape::ALL.choose(rng).expect("non-empty"),
                color: *Color::ALL.choose(rng).expect("non-empty"),
                size: *Size::ALL.choose(rng).expect("non-empty"),
                row,
                col,
                held_item: None,
            })
            .collect();
        let mut held = vec![false; n];
        for i in 0..n {
            if !rng.gen_bool(config.hold_prob) || held[i] {
                continue;
            }
            let mut options: Vec<usize> =
                (0..n).filter(|&j| j != i && !held[j] && objects[j].held_item.is_none() && adjacent(&objects[i], &objects[j])).collect();
            options.sort_unstable();
            if let Some(&j) = options.choose(rng) {
                objects[i].held_item = Some(j);
                held[j] = true;
            }
        }
        Scene { grid: config.grid, cell_px: config.cell_px, objects }
    }

    pub fn image_px(&self) -> usize {
        self.grid * self.cell_px
    }

    /// Region box of object `i`: big objects nearly fill their cell, small
    /// ones sit in the centre half.
    pub fn region(&self, i: usize) -> BBox {
        let o = &self.objects[i];
        let c = self.cell_px as f64;
        let inset = match o.size {
            Size::Big => 1.0,
            Size::Small => c / 4.0,
        };
        let (x0, y0) = (o.col as f64 * c, o.row as f64 * c);
        BBox::new(x0 + inset, y0 + inset, x0 + c - inset, y0 + c - inset)
    }

    pub fn regions(&self) -> Vec<BBox> {
        (0..self.objects.len()).map(|i| self.region(i)).collect()
    }

    /// Does `rel(a, b)` hold, i.e. "a <rel> b"?
    pub fn relates(&self, rel: Relation, a: usize, b: usize) -> bool {
        let (x, y) = (&self.objects[a], &self.objects[b]);
        if a == b {
            return false;
        }
        match rel {
            Relation::LeftOf => x.row == y.row && x.col + 1 == y.col,
            Relation::RightOf => x.row == y.row && x.col == y.col + 1,
            Relation::Above => x.col == y.col && x.row + 1 == y.row,
            Relation::Below => x.col == y.col && x.row == y.row + 1,
            Relation::Holding => x.held_item == Some(b),
        }
    }

    pub fn partners(&self, rel: Relation, a: usize) -> Vec<usize> {
        (0..self.objects.len()).filter(|&b| self.relates(rel, a, b)).collect()
    }

    pub fn matching(&self, d: &Description) -> Vec<usize> {
        (0..self.objects.len()).filter(|&i| d.matches(&self.objects[i])).collect()
    }

    fn at(&self, row: isize, col: isize) -> Option<&Object> {
        if row < 0 || col < 0 {
            return None;
        }
        self.objects.iter().find(|o| o.row as isize == row && o.col as isize == col)
    }

    /// One feature row per object, `objects.len() × feature_dim`.
    pub fn features(&self) -> Vec<Vec<f64>> {
        let dim = ATTR_DIM + 2 * self.grid + 2 + 5 * ATTR_DIM;
        self.objects
            .iter()
            .map(|o| {
                let mut f = vec![0.0; dim];
                write_attrs(&mut f[..ATTR_DIM], o);
                f[ATTR_DIM + o.row] = 1.0;
                f[ATTR_DIM + self.grid + o.col] = 1.0;
                let flags = ATTR_DIM + 2 * self.grid;
                if o.held_item.is_some() {
                    f[flags] = 1.0;
                }
                if self.objects.iter().any(|h| h.held_item == Some(o.id)) {
                    f[flags + 1] = 1.0;
                }
                let (r, c) = (o.row as isize, o.col as isize);
                let context = [
                    self.at(r, c - 1),
                    self.at(r, c + 1),
                    self.at(r - 1, c),
                    self.at(r + 1, c),
                    o.held_item.map(|j| &self.objects[j]),
                ];
                for (slot, n) in context.iter().enumerate() {
                    if let Some(n) = n {
                        let s = flags + 2 + slot * ATTR_DIM;
                        write_attrs(&mut f[s..s + ATTR_DIM], n);
                    }
                }
                f
            })
            .collect()
    }
}

fn adjacent(a: &Object, b: &Object) -> bool {
    a.row.abs_diff(b.row) + a.col.abs_diff(b.col) == 1
}

fn write_attrs(f: &mut [f64], o: &Object) {
    f[Shape::ALL.iter().position(|&s| s == o.shape).expect("shape")] = 1.0;
    f[3 + Color::ALL.iter().position(|&c| c == o.color).expect("color")] = 1.0;
    f[7 + Size::ALL.iter().position(|&s| s == o.size).expect("size")] = 1.0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap(), 1.0 / 7.0);
        assert!(matches!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)), Err(GrounderError::DegenerateBox(_))));
    }

    #[test]
    fn scenes_respect_bounds() {
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = Scene::generate(&cfg, &mut rng);
            assert!(s.objects.len() <= 12);
            let regions = s.regions();
            for (i, a) in regions.iter().enumerate() {
                assert!(a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= 96.0 && a.y2 <= 96.0);
                for b in &regions[i + 1..] {
                    assert!(iou(a, b).unwrap() < 0.5);
                }
            }
            for o in &s.objects {
                if let Some(j) = o.held_item {
                    assert!(adjacent(o, &s.objects[j]));
                }
            }
            let f = s.features();
            assert!(f.iter().all(|r| r.len() == cfg.feature_dim()));
        }
    }

    #[test]
    fn relations_are_converse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Scene::generate(&WorldConfig::default(), &mut rng);
        let n = s.objects.len();
        for a in 0..n {
            for b in 0..n {
                assert_eq!(s.relates(Relation::LeftOf, a, b), s.relates(Relation::RightOf, b, a));
                assert_eq!(s.relates(Relation::Above, a, b), s.relates(Relation::Below, b, a));
            }
        }
    }
}
