//! Window shifting on the HEALPix patch list.
//!
//! A [`ShiftPlan`] is a gather permutation: the shifted list is
//! `shifted[i] = original[forward[i]]`, and `inverse` undoes it. Every patch
//! also carries an origin-group label; attention inside a window is only
//! allowed between patches with equal labels.
//!
//! Spiral shifting rolls the ring-ordered patch list. Grid shifting rolls the
//! local `(x, y)` coordinates inside each base pixel.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::GridError;
use crate::healpix::{
    from_local_xy_unchecked, local_xy_unchecked, nest_to_ring_unchecked, ring_position_unchecked,
    FaceCoord,
};
use crate::patch::{PatchGrid, WindowPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftStrategy {
    Spiral,
    Grid,
}

impl std::str::FromStr for ShiftStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spiral" => Ok(Self::Spiral),
            "grid" => Ok(Self::Grid),
            other => Err(format!("unknown shift strategy '{other}'")),
        }
    }
}

impl std::fmt::Display for ShiftStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Spiral => "spiral",
            Self::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftPlan {
    pub strategy: ShiftStrategy,
    pub shift: usize,
    pub grid: PatchGrid,
    pub forward: Vec<usize>,
    pub inverse: Vec<usize>,
    pub origin_group: Vec<u32>,
    /// False when every origin group is equal, i.e. no attention masking is needed.
    pub masked: bool,
}

impl ShiftPlan {
    pub fn identity(grid: PatchGrid, strategy: ShiftStrategy) -> Self {
        let forward: Vec<usize> = (0..grid.len()).collect();
        Self {
            strategy,
            shift: 0,
            grid,
            inverse: forward.clone(),
            forward,
            origin_group: vec![0; grid.len()],
            masked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }

    /// Gathers rows of width `width` into shifted order.
    pub fn apply<T: Copy>(&self, rows: &[T], width: usize) -> Vec<T> {
        gather_rows(rows, width, &self.forward)
    }

    /// Undoes [`ShiftPlan::apply`].
    pub fn restore<T: Copy>(&self, rows: &[T], width: usize) -> Vec<T> {
        gather_rows(rows, width, &self.inverse)
    }

    fn from_forward(
        strategy: ShiftStrategy,
        shift: usize,
        grid: PatchGrid,
        forward: Vec<usize>,
        origin_group: Vec<u32>,
    ) -> Self {
        let mut inverse = vec![0; forward.len()];
        for (i, &f) in forward.iter().enumerate() {
            inverse[f] = i;
        }
        let masked = origin_group.iter().any(|&g| g != origin_group[0]);
        Self { strategy, shift, grid, forward, inverse, origin_group, masked }
    }
}

fn gather_rows<T: Copy>(rows: &[T], width: usize, index: &[usize]) -> Vec<T> {
    assert_eq!(rows.len(), index.len() * width, "row count does not match plan length");
    let mut out = Vec::with_capacity(rows.len());
    for &src in index {
        out.extend_from_slice(&rows[src * width..(src + 1) * width]);
    }
    out
}

/// Patch indices of the grid sorted into ring order (ring, then azimuth).
pub fn ring_order(grid: &PatchGrid) -> Vec<usize> {
    let nside = grid.nside();
    let mut keyed: Vec<(u64, usize)> = (0..grid.len())
        .map(|i| (nest_to_ring_unchecked(nside, i as u64), i))
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Spiral shift: convert to ring order, roll by `shift` patches, convert back.
///
/// A patch at ring position `p` moves to `p + shift` (mod list length). The
/// ring list has geometric breaks where consecutive entries are not
/// neighbours along the full-sphere spiral (gaps left by the excluded base
/// pixels, and the wrap from the last entry back to the pole). Patches whose
/// move crosses a break get a group identifying the run they came from;
/// all others share group 0.
pub fn spiral_shift_plan(grid: &PatchGrid, shift: usize) -> Result<ShiftPlan, GridError> {
    let len = grid.len();
    if shift >= len {
        return Err(GridError::ShiftOutOfRange { shift, limit: len });
    }
    let nside = grid.nside();
    let mut keyed: Vec<(u64, usize)> = (0..len)
        .map(|i| (nest_to_ring_unchecked(nside, i as u64), i))
        .collect();
    keyed.sort_unstable();

    let mut ring_pos = vec![0usize; len];
    for (q, &(_, i)) in keyed.iter().enumerate() {
        ring_pos[i] = q;
    }

    // breaks_upto[q] = number of breaks at positions 1..=q, doubled for wrap-free lookups.
    let is_break = |q: usize| -> bool {
        let q = q % len;
        q == 0 || keyed[q].0 != keyed[q - 1].0 + 1
    };
    let mut breaks_upto = vec![0u32; 2 * len];
    for q in 1..2 * len {
        breaks_upto[q] = breaks_upto[q - 1] + is_break(q) as u32;
    }
    let segments = breaks_upto[len - 1] + 1;

    let mut forward = vec![0usize; len];
    let mut origin_group = vec![0u32; len];
    for i in 0..len {
        let dest = ring_pos[i];
        let src = (dest + len - shift) % len;
        forward[i] = keyed[src].1;
        let crossed = breaks_upto[src + shift] - breaks_upto[src];
        if crossed > 0 {
            origin_group[i] = 1 + breaks_upto[src];
        }
    }
    debug_assert!(origin_group.iter().all(|&g| g <= segments));
    Ok(ShiftPlan::from_forward(ShiftStrategy::Spiral, shift, *grid, forward, origin_group))
}

/// Grid shift: inside every base pixel the patch at local `(x, y)` moves to
/// `((x + shift) mod n, (y + shift) mod n)`. Patches never leave their base
/// pixel; the up to four wrapped quadrants get distinct groups.
pub fn grid_shift_plan(grid: &PatchGrid, shift: usize) -> Result<ShiftPlan, GridError> {
    let nside = grid.nside();
    let n = nside.get() as usize;
    if shift >= n {
        return Err(GridError::ShiftOutOfRange { shift, limit: n });
    }
    let len = grid.len();
    let mut forward = vec![0usize; len];
    let mut origin_group = vec![0u32; len];
    for dest in 0..len {
        let c = local_xy_unchecked(nside, dest as u64);
        let (x, y) = (c.x as usize, c.y as usize);
        let src = FaceCoord {
            face: c.face,
            x: ((x + n - shift) % n) as u32,
            y: ((y + n - shift) % n) as u32,
        };
        forward[dest] = from_local_xy_unchecked(nside, src) as usize;
        origin_group[dest] = (x < shift) as u32 + 2 * (y < shift) as u32;
    }
    Ok(ShiftPlan::from_forward(ShiftStrategy::Grid, shift, *grid, forward, origin_group))
}

pub fn shift_plan(
    strategy: ShiftStrategy,
    grid: &PatchGrid,
    shift: usize,
) -> Result<ShiftPlan, GridError> {
    match strategy {
        ShiftStrategy::Spiral => spiral_shift_plan(grid, shift),
        ShiftStrategy::Grid => grid_shift_plan(grid, shift),
    }
}

type PlanKey = (ShiftStrategy, PatchGrid, usize);

fn plan_cache() -> &'static Mutex<HashMap<PlanKey, Arc<ShiftPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<ShiftPlan>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Shared, immutable plan for `(strategy, grid, shift)`; built once per process.
pub fn cached_plan(
    strategy: ShiftStrategy,
    grid: &PatchGrid,
    shift: usize,
) -> Result<Arc<ShiftPlan>, GridError> {
    let key = (strategy, *grid, shift);
    if let Some(p) = plan_cache().lock().unwrap().get(&key) {
        return Ok(p.clone());
    }
    let plan = Arc::new(shift_plan(strategy, grid, shift)?);
    let mut cache = plan_cache().lock().unwrap();
    Ok(cache.entry(key).or_insert(plan).clone())
}

/// Per-window boolean attention masks, `true` meaning "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    window_size: usize,
    num_windows: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn num_windows(&self) -> usize {
        self.num_windows
    }

    #[inline]
    pub fn get(&self, window: usize, i: usize, j: usize) -> bool {
        self.data[(window * self.window_size + i) * self.window_size + j]
    }

    /// Row-major `window_size × window_size` block of one window.
    pub fn window(&self, w: usize) -> &[bool] {
        let n2 = self.window_size * self.window_size;
        &self.data[w * n2..(w + 1) * n2]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn all_true(&self) -> bool {
        self.data.iter().all(|&b| b)
    }
}

pub fn attention_mask(plan: &ShiftPlan, part: &WindowPartition) -> Result<AttentionMask, GridError> {
    if plan.grid.len() != part.grid().len() || plan.grid.nside() != part.grid().nside() {
        return Err(GridError::GridMismatch { plan: plan.grid.len(), partition: part.grid().len() });
    }
    let ws = part.window_size();
    let nw = part.num_windows();
    let mut data = Vec::with_capacity(nw * ws * ws);
    for w in 0..nw {
        let groups = &plan.origin_group[part.window(w)];
        for &gi in groups {
            data.extend(groups.iter().map(|&gj| gi == gj));
        }
    }
    Ok(AttentionMask { window_size: ws, num_windows: nw, data })
}

/// Ring number of every patch, for diagnostics and tests.
pub fn ring_numbers(grid: &PatchGrid) -> Vec<u64> {
    let nside = grid.nside();
    (0..grid.len())
        .map(|i| ring_position_unchecked(nside, nest_to_ring_unchecked(nside, i as u64)).0)
        .collect()
}
