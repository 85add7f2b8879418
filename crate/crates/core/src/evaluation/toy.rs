//! Built-in synthetic datasets with known structure.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::schema::{Cell, EntityInstance, EntitySchema, LeafKind, PropertySpec, Value};

pub const TOY_NAMES: [&str; 4] = ["two_moons", "copy_pair", "correlated_table", "binary_grid"];

/// Categories of each copy_pair leaf.
pub const COPY_CATEGORIES: usize = 4;
pub const GRID_SIZE: usize = 3;

#[derive(Debug, Clone)]
pub struct ToyData {
    pub schema: EntitySchema,
    pub entities: Vec<EntityInstance>,
}

fn numerical(path: &str) -> PropertySpec {
    PropertySpec { path: path.into(), kind: LeafKind::Numerical { normalizer: None } }
}

fn categorical(path: &str, labels: &[&str]) -> PropertySpec {
    PropertySpec {
        path: path.into(),
        kind: LeafKind::Categorical { categories: labels.iter().map(|s| s.to_string()).collect() },
    }
}

fn num(x: f64) -> Cell {
    Cell::Present(Value::Num(x))
}

fn cat(c: usize) -> Cell {
    Cell::Present(Value::Cat(c))
}

/// Generate a named toy dataset. `noise` is the standard deviation of the
/// additive noise (two_moons, correlated_table) or the bit-flip probability
/// (binary_grid); copy_pair ignores it.
pub fn toy_dataset(name: &str, n: usize, noise: f64, seed: u64) -> Result<ToyData> {
    if n == 0 {
        return Err(Error::invalid("toy datasets need n >= 1"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid("noise must be finite and non-negative"));
    }
    match name {
        "two_moons" => Ok(two_moons(n, noise, seed)),
        "copy_pair" => Ok(copy_pair(n, seed)),
        "correlated_table" => Ok(correlated_table(n, noise, seed)),
        "binary_grid" => {
            if noise > 1.0 {
                return Err(Error::invalid("binary_grid noise is a flip probability in [0, 1]"));
            }
            Ok(binary_grid(n, noise, seed))
        }
        other => Err(Error::invalid(format!("unknown toy dataset `{other}` (expected one of {})", TOY_NAMES.join(", ")))),
    }
}

fn linspace(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { 0.0 } else { PI * i as f64 / (n - 1) as f64 })
}

/// Two interleaved half circles: the upper one centred at the origin and the
/// lower one centred at (1, 0.5), both of radius 1.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> ToyData {
    let schema = EntitySchema::from_leaves(vec![numerical("x"), numerical("y"), categorical("class", &["0", "1"])])
        .expect("valid schema");
    let n_upper = n / 2;
    let mut points: Vec<(f64, f64, usize)> = linspace(n_upper).map(|t| (t.cos(), t.sin(), 0)).collect();
    points.extend(linspace(n - n_upper).map(|t| (1.0 - t.cos(), 0.5 - t.sin(), 1)));
    let mut rng = stream_rng(seed, Stream::Toy, 0);
    points.shuffle(&mut rng);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let entities = points
        .into_iter()
        .map(|(x, y, c)| {
            let (dx, dy) = if noise > 0.0 { (normal.sample(&mut rng), normal.sample(&mut rng)) } else { (0.0, 0.0) };
            EntityInstance::new(vec![num(x + dx), num(y + dy), cat(c)])
        })
        .collect();
    ToyData { schema, entities }
}

fn arc_distance(x: f64, y: f64, cx: f64, cy: f64, upper: bool) -> f64 {
    let (dx, dy) = (x - cx, y - cy);
    let on_arc = if upper { dy >= 0.0 } else { dy <= 0.0 };
    if on_arc {
        ((dx * dx + dy * dy).sqrt() - 1.0).abs()
    } else {
        let d1 = ((dx - 1.0).powi(2) + dy * dy).sqrt();
        let d2 = ((dx + 1.0).powi(2) + dy * dy).sqrt();
        d1.min(d2)
    }
}

/// Euclidean distance from a point to the noise-free two-moons curves.
pub fn moons_manifold_distance(x: f64, y: f64) -> f64 {
    arc_distance(x, y, 0.0, 0.0, true).min(arc_distance(x, y, 1.0, 0.5, false))
}

/// Two categorical leaves holding the same uniformly drawn label.
pub fn copy_pair(n: usize, seed: u64) -> ToyData {
    let labels = ["a", "b", "c", "d"];
    let schema = EntitySchema::from_leaves(vec![categorical("x", &labels), categorical("y", &labels)]).expect("valid schema");
    let mut rng = stream_rng(seed, Stream::Toy, 0);
    let entities = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..COPY_CATEGORIES);
            EntityInstance::new(vec![cat(c), cat(c)])
        })
        .collect();
    ToyData { schema, entities }
}

/// Target leaves of correlated_table used for downstream efficacy.
pub const REGRESSION_TARGET: &str = "outcome.value";
pub const CLASSIFICATION_TARGET: &str = "outcome.label";

/// Mixed-type table with planted dependencies:
/// `signal.b = 2 a + e`, `group.name` bins `a + e`, `group.offset` is a
/// per-group level plus noise, `outcome.value = a + 0.5 offset + e` and
/// `outcome.label` thresholds `b - offset + e`.
pub fn correlated_table(n: usize, noise: f64, seed: u64) -> ToyData {
    let schema = EntitySchema::from_leaves(vec![
        numerical("signal.a"),
        numerical("signal.b"),
        categorical("group.name", &["high", "low", "mid"]),
        numerical("group.offset"),
        numerical(REGRESSION_TARGET),
        categorical(CLASSIFICATION_TARGET, &["neg", "pos"]),
    ])
    .expect("valid schema");
    let mut rng = stream_rng(seed, Stream::Toy, 0);
    let gauss = |rng: &mut crate::rng::Rng| -> f64 { rand_distr::StandardNormal.sample(rng) };
    let entities = (0..n)
        .map(|_| {
            let a = gauss(&mut rng);
            let b = 2.0 * a + noise * gauss(&mut rng);
            let g = a + noise * gauss(&mut rng);
            // Category indices follow the sorted label order: high, low, mid.
            let (group, level) = if g < -0.5 {
                (1, -2.0)
            } else if g < 0.5 {
                (2, 0.0)
            } else {
                (0, 2.0)
            };
            let offset = level + noise * gauss(&mut rng);
            let value = a + 0.5 * offset + noise * gauss(&mut rng);
            let label = usize::from(b - offset + noise * gauss(&mut rng) > 0.0);
            EntityInstance::new(vec![num(a), num(b), cat(group), num(offset), num(value), cat(label)])
        })
        .collect();
    ToyData { schema, entities }
}

/// `GRID_SIZE x GRID_SIZE` binary pixels: each entity is either horizontal or
/// vertical stripes with random stripe bits, then every pixel flips with
/// probability `noise`.
pub fn binary_grid(n: usize, noise: f64, seed: u64) -> ToyData {
    let mut leaves = Vec::new();
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            leaves.push(categorical(&format!("row{r}.col{c}"), &["0", "1"]));
        }
    }
    let schema = EntitySchema::from_leaves(leaves).expect("valid schema");
    let mut rng = stream_rng(seed, Stream::Toy, 0);
    let entities = (0..n)
        .map(|_| {
            let horizontal = rng.gen_bool(0.5);
            let stripes: Vec<bool> = (0..GRID_SIZE).map(|_| rng.gen_bool(0.5)).collect();
            let mut cells = Vec::with_capacity(GRID_SIZE * GRID_SIZE);
            for r in 0..GRID_SIZE {
                for c in 0..GRID_SIZE {
                    let bit = stripes[if horizontal { r } else { c }] ^ (noise > 0.0 && rng.gen_bool(noise));
                    cells.push(cat(bit as usize));
                }
            }
            EntityInstance::new(cells)
        })
        .collect();
    ToyData { schema, entities }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nums(e: &EntityInstance, i: usize) -> f64 {
        e.cells[i].value().and_then(Value::as_num).unwrap()
    }

    #[test]
    fn noise_free_moons_lie_on_the_curves() {
        let d = toy_dataset("two_moons", 4, 0.0, 1).unwrap();
        assert_eq!(d.entities.len(), 4);
        for e in &d.entities {
            assert!(moons_manifold_distance(nums(e, 0), nums(e, 1)) < 1e-12);
        }
        let mut classes: Vec<_> = d.entities.iter().map(|e| e.cells[2].clone()).collect();
        classes.sort_by_key(|c| format!("{c:?}"));
        assert_eq!(classes, vec![cat(0), cat(0), cat(1), cat(1)]);
    }

    #[test]
    fn manifold_distance_geometry() {
        assert!(moons_manifold_distance(0.0, 1.0) < 1e-12);
        assert!(moons_manifold_distance(1.0, -0.5) < 1e-12);
        assert!((moons_manifold_distance(0.0, 0.0) - (1.25f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((moons_manifold_distance(-1.0, -0.3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn copy_pair_copies() {
        let d = toy_dataset("copy_pair", 200, 0.0, 3).unwrap();
        assert!(d.entities.iter().all(|e| e.cells[0] == e.cells[1]));
        assert_eq!(d.schema.dim(), 2);
    }

    #[test]
    fn correlated_table_is_reproducible() {
        let a = toy_dataset("correlated_table", 50, 0.3, 9).unwrap();
        let b = toy_dataset("correlated_table", 50, 0.3, 9).unwrap();
        assert_eq!(a.entities, b.entities);
        let c = toy_dataset("correlated_table", 50, 0.3, 10).unwrap();
        assert_ne!(a.entities, c.entities);
        let target = a.schema.require_leaf(REGRESSION_TARGET).unwrap();
        assert!(a.entities.iter().all(|e| e.cells[target].is_present()));
    }

    #[test]
    fn grid_has_stripes() {
        let d = toy_dataset("binary_grid", 20, 0.0, 2).unwrap();
        assert_eq!(d.schema.dim(), 9);
        assert!(d.schema.leaf_index("row1.col2").is_some());
        for e in &d.entities {
            let bit = |r: usize, c: usize| e.cells[r * GRID_SIZE + c].clone();
            let rows = (0..3).all(|r| (0..3).all(|c| bit(r, c) == bit(r, 0)));
            let cols = (0..3).all(|c| (0..3).all(|r| bit(r, c) == bit(0, c)));
            assert!(rows || cols);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(toy_dataset("spirals", 10, 0.0, 0).is_err());
        assert!(toy_dataset("two_moons", 0, 0.0, 0).is_err());
    }
}
