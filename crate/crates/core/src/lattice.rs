//! Nearest-neighbour geometry of `Z^d` and of the torus `(Z mod L)^d`.
//!
//! Sites are addressed either by explicit coordinates ([`Site`]) or by a packed
//! integer key. The simulation engine works on keys only; coordinates are for
//! callers and tests.
//!
//! Key layout:
//! - torus: row-major with the first coordinate as the column index,
//!   `key = sum_i c_i * L^i`;
//! - unbounded: each coordinate is offset into an unsigned bit field of
//!   `width(d)` bits, first coordinate in the most significant field.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Largest supported dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    BadDimension(usize),
    #[error("torus side must be at least 3 (got {0})")]
    SideTooSmall(u64),
    #[error("site has {got} coordinates, geometry has dimension {want}")]
    CoordinateCount { got: usize, want: usize },
    #[error("coordinate {coord} outside [0, {side}) on the torus")]
    OffTorus { coord: i64, side: u64 },
    #[error("coordinate {coord} exceeds the packing bound |c| < {bound} of the unbounded lattice")]
    Overflow { coord: i64, bound: i64 },
    #[error("key {0} does not decode to a valid site")]
    BadKey(u64),
    #[error("torus with side {side} in dimension {dim} has too many sites for a 64-bit key")]
    TooLarge { side: u64, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Torus { side: u64 },
    Unbounded,
}

/// A lattice site. Unused trailing coordinates are kept at zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    coords: [i64; MAX_DIM],
    dim: u8,
}

impl Site {
    pub fn new(coords: &[i64]) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&coords.len()),
            "a site needs 1..=3 coordinates"
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site {
            coords: c,
            dim: coords.len() as u8,
        }
    }

    pub fn origin(dim: usize) -> Self {
        Site::new(&[0; MAX_DIM][..dim])
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords[..self.dim as usize]
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Dimension plus topology, with the packing constants precomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GeometrySpec", into = "GeometrySpec")]
pub struct Geometry {
    dim: usize,
    topology: Topology,
    /// Torus: `L^i`. Unbounded: `1 << (width * (d-1-i))`.
    strides: [u64; MAX_DIM],
}

#[derive(Serialize, Deserialize)]
struct GeometrySpec {
    dim: usize,
    topology: Topology,
}

impl TryFrom<GeometrySpec> for Geometry {
    type Error = LatticeError;
    fn try_from(s: GeometrySpec) -> Result<Self, Self::Error> {
        match s.topology {
            Topology::Torus { side } => Geometry::torus(s.dim, side),
            Topology::Unbounded => Geometry::unbounded(s.dim),
        }
    }
}

impl From<Geometry> for GeometrySpec {
    fn from(g: Geometry) -> Self {
        GeometrySpec {
            dim: g.dim,
            topology: g.topology,
        }
    }
}

/// Bits per coordinate field on the unbounded lattice.
const fn field_width(dim: usize) -> u32 {
    match dim {
        1 | 2 => 31,
        _ => 21,
    }
}

impl Geometry {
    pub fn torus(dim: usize, side: u64) -> Result<Self, LatticeError> {
        check_dim(dim)?;
        if side < 3 {
            return Err(LatticeError::SideTooSmall(side));
        }
        let mut strides = [0u64; MAX_DIM];
        let mut s: u64 = 1;
        // The first coordinate is the column: (x, y) -> x + L*y.
        for stride in strides.iter_mut().take(dim) {
            *stride = s;
            s = s
                .checked_mul(side)
                .filter(|&n| n <= u32::MAX as u64)
                .ok_or(LatticeError::TooLarge { side, dim })?;
        }
        Ok(Geometry {
            dim,
            topology: Topology::Torus { side },
            strides,
        })
    }

    pub fn unbounded(dim: usize) -> Result<Self, LatticeError> {
        check_dim(dim)?;
        let w = field_width(dim);
        let mut strides = [0u64; MAX_DIM];
        for (i, s) in strides.iter_mut().enumerate().take(dim) {
            *s = 1u64 << (w * (dim - 1 - i) as u32);
        }
        Ok(Geometry {
            dim,
            topology: Topology::Unbounded,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.topology, Topology::Torus { .. })
    }

    /// Number of neighbours of every site, `2d`.
    pub fn degree(&self) -> usize {
        2 * self.dim
    }

    /// `N = L^d` on the torus, `None` on the unbounded lattice.
    pub fn site_count(&self) -> Option<u64> {
        match self.topology {
            Topology::Torus { side } => Some(side.pow(self.dim as u32)),
            Topology::Unbounded => None,
        }
    }

    /// Exclusive bound on `|coordinate|` for the unbounded lattice.
    pub fn coordinate_bound(&self) -> i64 {
        1i64 << (field_width(self.dim) - 1)
    }

    /// Bits per coordinate field in unbounded-lattice keys.
    pub fn key_field_width(&self) -> u32 {
        field_width(self.dim)
    }

    /// Nearest neighbours in fixed axis order, minus before plus.
    pub fn neighbors(&self, x: &Site) -> Vec<Site> {
        let mut out = Vec::with_capacity(self.degree());
        for axis in 0..self.dim {
            for step in [-1i64, 1] {
                let mut c = *x;
                let v = c.coords[axis] + step;
                c.coords[axis] = match self.topology {
                    Topology::Torus { side } => v.rem_euclid(side as i64),
                    Topology::Unbounded => v,
                };
                out.push(c);
            }
        }
        out
    }

    pub fn encode(&self, x: &Site) -> Result<u64, LatticeError> {
        if x.dim() != self.dim {
            return Err(LatticeError::CoordinateCount {
                got: x.dim(),
                want: self.dim,
            });
        }
        let mut key = 0u64;
        match self.topology {
            Topology::Torus { side } => {
                for (i, &c) in x.coords().iter().enumerate() {
                    if c < 0 || c as u64 >= side {
                        return Err(LatticeError::OffTorus { coord: c, side });
                    }
                    key += c as u64 * self.strides[i];
                }
            }
            Topology::Unbounded => {
                let bound = self.coordinate_bound();
                for (i, &c) in x.coords().iter().enumerate() {
                    if c.abs() >= bound {
                        return Err(LatticeError::Overflow { coord: c, bound });
                    }
                    key += (c + bound) as u64 * self.strides[i];
                }
            }
        }
        Ok(key)
    }

    pub fn decode(&self, key: u64) -> Result<Site, LatticeError> {
        let mut coords = [0i64; MAX_DIM];
        match self.topology {
            Topology::Torus { side } => {
                if key >= self.site_count().unwrap_or(0) {
                    return Err(LatticeError::BadKey(key));
                }
                for (i, c) in coords.iter_mut().enumerate().take(self.dim) {
                    *c = ((key / self.strides[i]) % side) as i64;
                }
            }
            Topology::Unbounded => {
                let w = field_width(self.dim);
                let mask = (1u64 << w) - 1;
                if key >> (w * self.dim as u32) != 0 {
                    return Err(LatticeError::BadKey(key));
                }
                let bound = self.coordinate_bound();
                for (i, c) in coords.iter_mut().enumerate().take(self.dim) {
                    let field = (key / self.strides[i]) & mask;
                    if field == 0 {
                        return Err(LatticeError::BadKey(key));
                    }
                    *c = field as i64 - bound;
                }
            }
        }
        Ok(Site {
            coords,
            dim: self.dim as u8,
        })
    }

    /// Key of the neighbour in direction `dir`, where `dir = 2*axis` is the
    /// minus step and `2*axis + 1` the plus step.
    #[inline]
    pub fn neighbor_key(&self, key: u64, dir: usize) -> Result<u64, LatticeError> {
        let axis = dir >> 1;
        let up = dir & 1 == 1;
        let stride = self.strides[axis];
        match self.topology {
            Topology::Torus { side } => {
                let c = (key / stride) % side;
                Ok(if up {
                    if c + 1 == side {
                        key - c * stride
                    } else {
                        key + stride
                    }
                } else if c == 0 {
                    key + (side - 1) * stride
                } else {
                    key - stride
                })
            }
            Topology::Unbounded => {
                let w = field_width(self.dim);
                let mask = (1u64 << w) - 1;
                let field = (key >> stride.trailing_zeros()) & mask;
                let next = if up { field + 1 } else { field - 1 };
                if next == 0 || next > mask {
                    let bound = self.coordinate_bound();
                    return Err(LatticeError::Overflow {
                        coord: next as i64 - bound,
                        bound,
                    });
                }
                Ok(if up { key + stride } else { key - stride })
            }
        }
    }

    /// Direction index of the opposite step.
    #[inline]
    pub const fn opposite(dir: usize) -> usize {
        dir ^ 1
    }
}

fn check_dim(dim: usize) -> Result<(), LatticeError> {
    if (1..=MAX_DIM).contains(&dim) {
        Ok(())
    } else {
        Err(LatticeError::BadDimension(dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(c: &[i64]) -> Site {
        Site::new(c)
    }

    #[test]
    fn torus_1d_wraps() {
        let g = Geometry::torus(1, 5).unwrap();
        assert_eq!(g.neighbors(&s(&[0])), vec![s(&[4]), s(&[1])]);
    }

    #[test]
    fn unbounded_2d_order() {
        let g = Geometry::unbounded(2).unwrap();
        assert_eq!(
            g.neighbors(&s(&[0, 0])),
            vec![s(&[-1, 0]), s(&[1, 0]), s(&[0, -1]), s(&[0, 1])]
        );
    }

    #[test]
    fn torus_3d_side_3() {
        let g = Geometry::torus(3, 3).unwrap();
        assert_eq!(
            g.neighbors(&s(&[2, 0, 1])),
            vec![
                s(&[1, 0, 1]),
                s(&[0, 0, 1]),
                s(&[2, 2, 1]),
                s(&[2, 1, 1]),
                s(&[2, 0, 0]),
                s(&[2, 0, 2]),
            ]
        );
    }

    #[test]
    fn torus_keys_are_row_major() {
        let g = Geometry::torus(2, 10).unwrap();
        assert_eq!(g.encode(&s(&[3, 7])).unwrap(), 73);
        assert_eq!(g.decode(73).unwrap(), s(&[3, 7]));
        assert_eq!(Geometry::torus(1, 5).unwrap().encode(&s(&[4])).unwrap(), 4);
        assert_eq!(
            Geometry::torus(3, 3).unwrap().encode(&s(&[1, 1, 1])).unwrap(),
            13
        );
    }

    #[test]
    fn invalid_geometries() {
        assert_eq!(Geometry::torus(4, 5), Err(LatticeError::BadDimension(4)));
        assert_eq!(Geometry::torus(2, 2), Err(LatticeError::SideTooSmall(2)));
        assert!(Geometry::unbounded(0).is_err());
    }

    #[test]
    fn unbounded_overflow_is_reported() {
        let g = Geometry::unbounded(2).unwrap();
        let b = g.coordinate_bound();
        assert_eq!(b, 1 << 30);
        assert!(matches!(
            g.encode(&s(&[b, 0])),
            Err(LatticeError::Overflow { .. })
        ));
        let edge = g.encode(&s(&[b - 1, 0])).unwrap();
        assert!(matches!(
            g.neighbor_key(edge, 1),
            Err(LatticeError::Overflow { .. })
        ));
        assert!(g.neighbor_key(edge, 0).is_ok());
    }

    #[test]
    fn torus_off_lattice_rejected() {
        let g = Geometry::torus(2, 4).unwrap();
        assert!(g.encode(&s(&[4, 0])).is_err());
        assert!(g.encode(&s(&[0, -1])).is_err());
        assert!(g.encode(&s(&[1])).is_err());
        assert!(g.decode(16).is_err());
    }

    #[test]
    fn geometry_serde_round_trip() {
        let g = Geometry::torus(2, 7).unwrap();
        let txt = serde_json::to_string(&g).unwrap();
        let back: Geometry = serde_json::from_str(&txt).unwrap();
        assert_eq!(g, back);
        assert!(serde_json::from_str::<Geometry>(r#"{"dim":2,"topology":{"torus":{"side":2}}}"#).is_err());
    }

    fn geometries() -> Vec<Geometry> {
        let mut v = Vec::new();
        for d in 1..=3 {
            v.push(Geometry::unbounded(d).unwrap());
            v.push(Geometry::torus(d, 3).unwrap());
            v.push(Geometry::torus(d, 17).unwrap());
        }
        v
    }

    fn random_site(g: &Geometry, raw: &[i64; 3]) -> Site {
        let c: Vec<i64> = raw[..g.dim()]
            .iter()
            .map(|&r| match g.topology() {
                Topology::Torus { side } => r.rem_euclid(side as i64),
                Topology::Unbounded => r % (g.coordinate_bound() - 1),
            })
            .collect();
        Site::new(&c)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn encode_decode_round_trip(raw in prop::array::uniform3(any::<i64>())) {
            for g in geometries() {
                let x = random_site(&g, &raw);
                let k = g.encode(&x).unwrap();
                prop_assert_eq!(g.decode(k).unwrap(), x);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn neighbors_symmetric_and_consistent(raw in prop::array::uniform3(-1_000_000i64..1_000_000)) {
            for g in geometries() {
                let x = random_site(&g, &raw);
                let nb = g.neighbors(&x);
                prop_assert_eq!(nb.len(), 2 * g.dim());
                if g.is_torus() {
                    let mut uniq = nb.clone();
                    uniq.sort();
                    uniq.dedup();
                    prop_assert_eq!(uniq.len(), nb.len());
                }
                let kx = g.encode(&x).unwrap();
                for (dir, y) in nb.iter().enumerate() {
                    prop_assert!(g.neighbors(y).contains(&x));
                    let ky = g.neighbor_key(kx, dir).unwrap();
                    prop_assert_eq!(ky, g.encode(y).unwrap());
                    prop_assert_eq!(g.neighbor_key(ky, Geometry::opposite(dir)).unwrap(), kx);
                }
            }
        }
    }
}
