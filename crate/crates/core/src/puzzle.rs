//! The puzzle module: split a tensor into its four spatial quadrants and
//! stitch four quadrant tensors back together.
//!
//! The last two axes are always `(H, W)`; any leading axes (channels, batch)
//! are carried through untouched. Odd sizes are zero-padded on the bottom and
//! right before splitting, and [`merge`] crops the padding away again, so
//! `merge(tile(x), size(x)) == x` holds for every shape.

use ndarray::{Array, ArrayView, Axis, Dimension, Slice};
use num_traits::Zero;

use crate::error::{Error, Result};

/// Quadrant grid positions in storage order.
pub const GRID: [(usize, usize); 4] = [(1, 1), (1, 2), (2, 1), (2, 2)];

/// The four quadrants of one tensor, indexed by 1-based `(row, col)` grid
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct PuzzleTiles<A, D: Dimension> {
    tiles: [Array<A, D>; 4],
    /// `(W/2, H/2)`, rounded up.
    tile_size: (usize, usize),
}

impl<A, D: Dimension> PuzzleTiles<A, D> {
    /// Assembles tiles given in [`GRID`] order. All four must share one shape.
    pub fn from_tiles(tiles: [Array<A, D>; 4]) -> Result<Self> {
        let shape = tiles[0].shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract("tiles need at least two (spatial) axes".into()));
        }
        for (t, pos) in tiles.iter().zip(GRID) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("tile {pos:?}"),
                    format!("{shape:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
        }
        let n = shape.len();
        let tile_size = (shape[n - 1], shape[n - 2]);
        Ok(Self { tiles, tile_size })
    }

    /// Tile at 1-based grid position `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> &Array<A, D> {
        &self.tiles[grid_index(i, j)]
    }

    pub fn tiles(&self) -> &[Array<A, D>; 4] {
        &self.tiles
    }

    pub fn into_tiles(self) -> [Array<A, D>; 4] {
        self.tiles
    }

    /// `(width, height)` of each tile.
    pub fn tile_size(&self) -> (usize, usize) {
        self.tile_size
    }

    /// Applies `f` to each tile, keeping grid positions.
    pub fn map<B, E: Dimension>(self, mut f: impl FnMut(Array<A, D>) -> Array<B, E>) -> Result<PuzzleTiles<B, E>> {
        let [a, b, c, d] = self.tiles;
        PuzzleTiles::from_tiles([f(a), f(b), f(c), f(d)])
    }
}

fn grid_index(i: usize, j: usize) -> usize {
    assert!(
        (1..=2).contains(&i) && (1..=2).contains(&j),
        "grid position ({i}, {j}) outside the 2x2 puzzle"
    );
    (i - 1) * 2 + (j - 1)
}

/// Splits `x` into four non-overlapping quadrants of size `⌈W/2⌉ × ⌈H/2⌉`.
pub fn tile<A, D>(x: ArrayView<'_, A, D>) -> Result<PuzzleTiles<A, D>>
where
    A: Clone + Zero,
    D: Dimension,
{
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::Contract("tile needs at least two (spatial) axes".into()));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    if h < 2 || w < 2 {
        return Err(Error::Contract(format!("tile needs H >= 2 and W >= 2, got {h}x{w}")));
    }
    let (th, tw) = (h.div_ceil(2), w.div_ceil(2));
    let padded = pad_bottom_right(x, 2 * th, 2 * tw);
    let quadrant = |i: usize, j: usize| {
        padded
            .slice_axis(Axis(nd - 2), Slice::from((i - 1) * th..i * th))
            .slice_axis(Axis(nd - 1), Slice::from((j - 1) * tw..j * tw))
            .to_owned()
    };
    PuzzleTiles::from_tiles(GRID.map(|(i, j)| quadrant(i, j)))
}

/// Places the quadrants back at their grid positions and crops to
/// `target_size = (W, H)`.
pub fn merge<A, D>(tiles: &PuzzleTiles<A, D>, target_size: (usize, usize)) -> Result<Array<A, D>>
where
    A: Clone + Zero,
    D: Dimension,
{
    let (w, h) = target_size;
    let (tw, th) = tiles.tile_size;
    if th != h.div_ceil(2) || tw != w.div_ceil(2) {
        return Err(Error::shape(
            format!("tile size for a {w}x{h} target"),
            format!("{}x{}", w.div_ceil(2), h.div_ceil(2)),
            format!("{tw}x{th}"),
        ));
    }
    let first = &tiles.tiles[0];
    let nd = first.ndim();
    let mut full_dim = first.raw_dim();
    full_dim[nd - 2] = 2 * th;
    full_dim[nd - 1] = 2 * tw;
    let mut full = Array::<A, D>::zeros(full_dim);
    for (t, (i, j)) in tiles.tiles.iter().zip(GRID) {
        full.slice_axis_mut(Axis(nd - 2), Slice::from((i - 1) * th..i * th))
            .slice_axis_mut(Axis(nd - 1), Slice::from((j - 1) * tw..j * tw))
            .assign(t);
    }
    Ok(full
        .slice_axis(Axis(nd - 2), Slice::from(0..h))
        .slice_axis(Axis(nd - 1), Slice::from(0..w))
        .to_owned())
}

fn pad_bottom_right<A, D>(x: ArrayView<'_, A, D>, h: usize, w: usize) -> Array<A, D>
where
    A: Clone + Zero,
    D: Dimension,
{
    let nd = x.ndim();
    let mut dim = x.raw_dim();
    let (xh, xw) = (dim[nd - 2], dim[nd - 1]);
    if (xh, xw) == (h, w) {
        return x.to_owned();
    }
    dim[nd - 2] = h;
    dim[nd - 1] = w;
    let mut out = Array::<A, D>::zeros(dim);
    out.slice_axis_mut(Axis(nd - 2), Slice::from(0..xh))
        .slice_axis_mut(Axis(nd - 1), Slice::from(0..xw))
        .assign(&x);
    out
}

/// `(W, H)` of a tensor whose last two axes are spatial.
pub fn spatial_size<A, D: Dimension>(x: &ArrayView<'_, A, D>) -> (usize, usize) {
    let s = x.shape();
    (s[s.len() - 1], s[s.len() - 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3, Array4};
    use proptest::prelude::*;

    #[test]
    fn four_by_four_quadrants() {
        let x = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as i32);
        let t = tile(x.view()).unwrap();
        assert_eq!(t.get(1, 1), &array![[0, 1], [4, 5]]);
        assert_eq!(t.get(1, 2), &array![[2, 3], [6, 7]]);
        assert_eq!(t.get(2, 1), &array![[8, 9], [12, 13]]);
        assert_eq!(t.get(2, 2), &array![[10, 11], [14, 15]]);
        assert_eq!(t.tile_size(), (2, 2));
    }

    #[test]
    fn odd_input_is_padded_to_even() {
        let x = Array2::from_shape_fn((5, 5), |(r, c)| (r * 5 + c + 1) as i32);
        let t = tile(x.view()).unwrap();
        assert_eq!(t.tile_size(), (3, 3));
        assert_eq!(t.get(1, 1), &array![[1, 2, 3], [6, 7, 8], [11, 12, 13]]);
        // bottom-right quadrant holds rows 3..5, cols 3..5 plus zero padding.
        assert_eq!(t.get(2, 2), &array![[19, 20, 0], [24, 25, 0], [0, 0, 0]]);
        assert_eq!(t.get(1, 2), &array![[4, 5, 0], [9, 10, 0], [14, 15, 0]]);
        assert_eq!(merge(&t, (5, 5)).unwrap(), x);
    }

    #[test]
    fn constant_tiles_merge_to_block_matrix() {
        let tiles = [1.0f32, 2.0, 3.0, 4.0].map(|v| Array2::from_elem((2, 2), v));
        let t = PuzzleTiles::from_tiles(tiles).unwrap();
        let m = merge(&t, (4, 4)).unwrap();
        assert_eq!(
            m,
            array![
                [1.0, 1.0, 2.0, 2.0],
                [1.0, 1.0, 2.0, 2.0],
                [3.0, 3.0, 4.0, 4.0],
                [3.0, 3.0, 4.0, 4.0]
            ]
        );
    }

    #[test]
    fn leading_axes_are_preserved() {
        let x = Array4::from_shape_fn((2, 3, 6, 4), |(b, c, y, x)| (b * 1000 + c * 100 + y * 10 + x) as u32);
        let t = tile(x.view()).unwrap();
        assert_eq!(t.get(2, 1).shape(), &[2, 3, 3, 2]);
        assert_eq!(t.get(2, 1)[[1, 2, 0, 1]], x[[1, 2, 3, 1]]);
        assert_eq!(merge(&t, (4, 6)).unwrap(), x);
    }

    #[test]
    fn undersized_input_rejected() {
        assert!(tile(Array2::<f32>::zeros((1, 8)).view()).is_err());
        assert!(tile(Array3::<f32>::zeros((3, 8, 1)).view()).is_err());
    }

    #[test]
    fn inconsistent_tiles_rejected() {
        let t = tile(Array2::<f32>::zeros((4, 4)).view()).unwrap();
        assert!(merge(&t, (6, 4)).is_err());
        let ragged = [
            Array2::<f32>::zeros((2, 2)),
            Array2::zeros((2, 2)),
            Array2::zeros((2, 3)),
            Array2::zeros((2, 2)),
        ];
        assert!(PuzzleTiles::from_tiles(ragged).is_err());
    }

    fn any_tensor() -> impl Strategy<Value = Array3<f32>> {
        (1usize..4, 2usize..12, 2usize..12).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-100.0f32..100.0, c * h * w)
                .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(x in any_tensor()) {
            let (_, h, w) = x.dim();
            let back = merge(&tile(x.view()).unwrap(), (w, h)).unwrap();
            prop_assert!(back.iter().zip(x.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn even_tiles_partition_the_input(c in 1usize..3, hh in 1usize..6, hw in 1usize..6) {
            let (h, w) = (2 * hh, 2 * hw);
            let x = Array3::from_shape_fn((c, h, w), |(k, y, x)| (k * h * w + y * w + x) as u32);
            let t = tile(x.view()).unwrap();
            let mut seen: Vec<u32> = t.tiles().iter().flat_map(|q| q.iter().copied()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..(c * h * w) as u32).collect::<Vec<_>>());
            for (q, (i, j)) in t.tiles().iter().zip(GRID) {
                for ((k, y, xx), v) in q.indexed_iter() {
                    prop_assert_eq!(*v, x[[k, (i - 1) * hh + y, (j - 1) * hw + xx]]);
                }
            }
        }

        #[test]
        fn pointwise_maps_commute(x in any_tensor()) {
            let g = |v: f32| (v * 0.5).tanh() + 1.0;
            let (_, h, w) = x.dim();
            let mapped = tile(x.view()).unwrap().map(|t| t.mapv(g)).unwrap();
            prop_assert_eq!(merge(&mapped, (w, h)).unwrap(), x.mapv(g));
        }
    }
}
