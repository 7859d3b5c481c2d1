//! Page instances and layout configurations.
//!
//! A page offers n candidate items to a k-tile grid. A configuration is the
//! step-ordered record of which item went to which tile; both index sets are
//! injective and every tile is filled.

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PageError {
    #[error("grid must have at least one row and column, got {rows}x{cols}")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("page offers {n} items but the grid needs {k}")]
    TooFewItems { n: usize, k: usize },
    #[error("item {index} has {actual} features, expected {expected}")]
    ItemWidthMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("item {index} feature {feature} is non-finite")]
    NonFiniteFeature { index: usize, feature: usize },
    #[error("user feature {feature} is non-finite")]
    NonFiniteUserFeature { feature: usize },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigurationError {
    #[error("configuration has {items} item picks and {tiles} tile picks, expected {k} each")]
    WrongLength { items: usize, tiles: usize, k: usize },
    #[error("item {0} assigned more than once")]
    DuplicateItem(usize),
    #[error("tile {0} filled more than once")]
    DuplicateTile(usize),
    #[error("item index {index} out of range for {n} items")]
    ItemOutOfRange { index: usize, n: usize },
    #[error("tile index {index} out of range for {k} tiles")]
    TileOutOfRange { index: usize, k: usize },
}

/// Rectangular tile grid. Tiles are indexed row-major: tile j sits at
/// (j / cols, j % cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Result<Self, PageError> {
        if rows == 0 || cols == 0 {
            return Err(PageError::EmptyGrid { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn k(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row_col(&self, tile: usize) -> (usize, usize) {
        (tile / self.cols, tile % self.cols)
    }

    pub fn tile_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Normalized 2-d coordinate feature for a tile; a degenerate axis (one
    /// row or one column) maps to 0.5.
    pub fn tile_coords(&self, tile: usize) -> [f64; 2] {
        let (r, c) = self.row_col(tile);
        let rf = if self.rows == 1 {
            0.5
        } else {
            r as f64 / (self.rows - 1) as f64
        };
        let cf = if self.cols == 1 {
            0.5
        } else {
            c as f64 / (self.cols - 1) as f64
        };
        [rf, cf]
    }

    /// All k tile coordinates as a [k, 2] matrix in tile-index order.
    pub fn coords_matrix(&self) -> Tensor {
        let mut values = Vec::with_capacity(self.k() * 2);
        for j in 0..self.k() {
            values.extend_from_slice(&self.tile_coords(j));
        }
        Tensor::matrix(self.k(), 2, values).unwrap()
    }
}

/// One recommendation request: a user, n candidate items, and the grid to
/// fill. Item features are stored raw; the policy/environment input for item
/// i is the concatenation [user, item_i].
#[derive(Debug, Clone, PartialEq)]
pub struct PageInstance {
    pub user: Vec<f64>,
    pub items: Vec<Vec<f64>>,
    pub grid: Grid,
}

impl PageInstance {
    pub fn new(user: Vec<f64>, items: Vec<Vec<f64>>, grid: Grid) -> Result<Self, PageError> {
        let page = Self { user, items, grid };
        page.validate()?;
        Ok(page)
    }

    pub fn validate(&self) -> Result<(), PageError> {
        let k = self.grid.k();
        if self.items.len() < k {
            return Err(PageError::TooFewItems {
                n: self.items.len(),
                k,
            });
        }
        for (feature, &v) in self.user.iter().enumerate() {
            if !v.is_finite() {
                return Err(PageError::NonFiniteUserFeature { feature });
            }
        }
        let expected = self.items[0].len();
        for (index, item) in self.items.iter().enumerate() {
            if item.len() != expected {
                return Err(PageError::ItemWidthMismatch {
                    index,
                    expected,
                    actual: item.len(),
                });
            }
            for (feature, &v) in item.iter().enumerate() {
                if !v.is_finite() {
                    return Err(PageError::NonFiniteFeature { index, feature });
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn k(&self) -> usize {
        self.grid.k()
    }

    pub fn item_width(&self) -> usize {
        self.items[0].len()
    }

    /// Width of the concatenated [user, item] input feature.
    pub fn input_width(&self) -> usize {
        self.user.len() + self.item_width()
    }

    pub fn item_input(&self, i: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_width());
        v.extend_from_slice(&self.user);
        v.extend_from_slice(&self.items[i]);
        v
    }

    /// All item inputs as an [n, input_width] matrix in item order.
    pub fn inputs_matrix(&self) -> Tensor {
        let mut values = Vec::with_capacity(self.n() * self.input_width());
        for i in 0..self.n() {
            values.extend_from_slice(&self.user);
            values.extend_from_slice(&self.items[i]);
        }
        Tensor::matrix(self.n(), self.input_width(), values).unwrap()
    }
}

/// Step-ordered assignment: step t placed item `items[t]` onto tile
/// `tiles[t]`. Both sequences are injective and cover every tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    items: Vec<usize>,
    tiles: Vec<usize>,
}

impl Configuration {
    pub fn new(
        items: Vec<usize>,
        tiles: Vec<usize>,
        n: usize,
        k: usize,
    ) -> Result<Self, ConfigurationError> {
        if items.len() != k || tiles.len() != k {
            return Err(ConfigurationError::WrongLength {
                items: items.len(),
                tiles: tiles.len(),
                k,
            });
        }
        let mut seen_item = vec![false; n];
        for &i in &items {
            if i >= n {
                return Err(ConfigurationError::ItemOutOfRange { index: i, n });
            }
            if seen_item[i] {
                return Err(ConfigurationError::DuplicateItem(i));
            }
            seen_item[i] = true;
        }
        let mut seen_tile = vec![false; k];
        for &j in &tiles {
            if j >= k {
                return Err(ConfigurationError::TileOutOfRange { index: j, k });
            }
            if seen_tile[j] {
                return Err(ConfigurationError::DuplicateTile(j));
            }
            seen_tile[j] = true;
        }
        Ok(Self { items, tiles })
    }

    pub fn k(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn tiles(&self) -> &[usize] {
        &self.tiles
    }

    pub fn item_at_step(&self, t: usize) -> usize {
        self.items[t]
    }

    pub fn tile_at_step(&self, t: usize) -> usize {
        self.tiles[t]
    }

    /// Item placed on each tile, indexed by tile.
    pub fn item_by_tile(&self) -> Vec<usize> {
        let mut out = vec![0; self.k()];
        for t in 0..self.k() {
            out[self.tiles[t]] = self.items[t];
        }
        out
    }
}

/// Every valid configuration of k steps over n items: ordered item
/// k-subsets crossed with tile permutations, lexicographic in step order.
pub fn enumerate_configurations(n: usize, k: usize) -> Vec<Configuration> {
    fn ordered_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        let mut used = vec![false; n];
        fn rec(
            n: usize,
            k: usize,
            current: &mut Vec<usize>,
            used: &mut Vec<bool>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if current.len() == k {
                out.push(current.clone());
                return;
            }
            for i in 0..n {
                if !used[i] {
                    used[i] = true;
                    current.push(i);
                    rec(n, k, current, used, out);
                    current.pop();
                    used[i] = false;
                }
            }
        }
        rec(n, k, &mut current, &mut used, &mut out);
        out
    }

    let item_seqs = ordered_subsets(n, k);
    let tile_seqs = ordered_subsets(k, k);
    let mut out = Vec::with_capacity(item_seqs.len() * tile_seqs.len());
    for items in &item_seqs {
        for tiles in &tile_seqs {
            out.push(Configuration::new(items.clone(), tiles.clone(), n, k).unwrap());
        }
    }
    out
}
