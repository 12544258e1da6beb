//! External multiresolution memory of visited regions.
//!
//! Low-dimensional tasks (d <= 2) use a dense grid per level. Higher
//! dimensions split coordinates into blocks of four and keep a sparse grid
//! over each block's subspace. Every cell stores occupancy, running means of
//! `f` and `|g|`, and the best `f` seen; writes happen only when the event
//! trigger fires.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::Mode;

pub const CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub enabled: bool,
    pub grid_levels: Vec<usize>,
    pub block_size: usize,
    pub block_levels: Vec<usize>,
    pub w_mem: f64,
    pub w_bar: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grid_levels: vec![8, 16, 32],
            block_size: 4,
            block_levels: vec![4, 8],
            w_mem: 0.2,
            w_bar: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub occupancy: u32,
    pub mean_f: f64,
    pub mean_g: f64,
    pub best_f: f64,
}

impl CellStats {
    fn update(&mut self, f: f64, g: f64) {
        self.occupancy += 1;
        let n = self.occupancy as f64;
        if self.occupancy == 1 {
            self.mean_f = f;
            self.mean_g = g;
            self.best_f = f;
        } else {
            self.mean_f += (f - self.mean_f) / n;
            self.mean_g += (g - self.mean_g) / n;
            self.best_f = self.best_f.min(f);
        }
    }

    fn features(&self) -> [f64; CHANNELS] {
        if self.occupancy == 0 {
            return [0.0; CHANNELS];
        }
        let o = self.occupancy as f64;
        [o / (1.0 + o), self.mean_f, self.mean_g, self.best_f]
    }
}

/// Stage-end summary handed to [`Memory::write`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub q: Vec<f64>,
    pub f: f64,
    pub g_norm: f64,
    pub mode: Mode,
    pub stalled: bool,
}

/// Uniform partition of `[-hw, hw]` into `res` cells per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Axis {
    hw: f64,
    res: usize,
}

impl Axis {
    fn width(&self) -> f64 {
        2.0 * self.hw / self.res as f64
    }

    fn cell(&self, x: f64) -> usize {
        let t = ((x + self.hw) / self.width()).floor();
        if t.is_nan() {
            return 0;
        }
        (t.max(0.0) as usize).min(self.res - 1)
    }

    fn center(&self, i: usize) -> f64 {
        -self.hw + (i as f64 + 0.5) * self.width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMemory {
    dim: usize,
    hw: f64,
    levels: Vec<usize>,
    cells: Vec<Vec<CellStats>>,
    /// Visited finest cells in first-visit order.
    visited: Vec<usize>,
    minimum: Vec<bool>,
}

impl GridMemory {
    fn new(dim: usize, hw: f64, levels: &[usize]) -> Self {
        let cells = levels.iter().map(|&r| vec![CellStats::default(); r.pow(dim as u32)]).collect();
        let finest = *levels.last().unwrap_or(&1);
        Self {
            dim,
            hw,
            levels: levels.to_vec(),
            cells,
            visited: Vec::new(),
            minimum: vec![false; finest.pow(dim as u32)],
        }
    }

    fn index(&self, level: usize, q: &[f64]) -> usize {
        let axis = Axis { hw: self.hw, res: self.levels[level] };
        let mut idx = 0;
        for &x in q.iter().take(self.dim) {
            idx = idx * axis.res + axis.cell(x);
        }
        idx
    }

    fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    fn center(&self, idx: usize) -> Vec<f64> {
        let axis = Axis { hw: self.hw, res: self.levels[self.finest()] };
        let mut c = vec![0.0; self.dim];
        let mut rem = idx;
        for k in (0..self.dim).rev() {
            c[k] = axis.center(rem % axis.res);
            rem /= axis.res;
        }
        c
    }

    fn neighbours(&self, idx: usize) -> Vec<usize> {
        let res = self.levels[self.finest()] as i64;
        let coords: Vec<i64> = if self.dim == 1 { vec![idx as i64] } else { vec![idx as i64 / res, idx as i64 % res] };
        let mut out = Vec::new();
        let offsets: Vec<Vec<i64>> = if self.dim == 1 {
            vec![vec![-1], vec![1]]
        } else {
            let mut o = Vec::new();
            for a in -1..=1 {
                for b in -1..=1 {
                    if a != 0 || b != 0 {
                        o.push(vec![a, b]);
                    }
                }
            }
            o
        };
        for off in offsets {
            let c: Vec<i64> = coords.iter().zip(&off).map(|(x, o)| x + o).collect();
            if c.iter().all(|&x| x >= 0 && x < res) {
                out.push(c.iter().fold(0, |acc, &x| acc * res + x) as usize);
            }
        }
        out
    }

    fn refresh_minimum(&mut self, idx: usize) {
        let fine = &self.cells[self.finest()];
        let me = fine[idx];
        self.minimum[idx] = me.occupancy > 0
            && self.neighbours(idx).iter().all(|&n| fine[n].occupancy == 0 || fine[n].best_f >= me.best_f);
    }

    fn write(&mut self, s: &EventSummary) {
        for level in 0..self.levels.len() {
            let i = self.index(level, &s.q);
            self.cells[level][i].update(s.f, s.g_norm);
        }
        let i = self.index(self.finest(), &s.q);
        if self.cells[self.finest()][i].occupancy == 1 {
            self.visited.push(i);
        }
        self.refresh_minimum(i);
        for n in self.neighbours(i) {
            self.refresh_minimum(n);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMemory {
    dim: usize,
    hw: f64,
    block_size: usize,
    levels: Vec<usize>,
    /// `cells[level][block]`: sparse cell map keyed by the flattened cell index.
    cells: Vec<Vec<BTreeMap<u64, CellStats>>>,
    minimum: Vec<BTreeMap<u64, bool>>,
}

impl BlockMemory {
    fn new(dim: usize, hw: f64, block_size: usize, levels: &[usize]) -> Self {
        let blocks = dim.div_ceil(block_size);
        Self {
            dim,
            hw,
            block_size,
            levels: levels.to_vec(),
            cells: levels.iter().map(|_| vec![BTreeMap::new(); blocks]).collect(),
            minimum: vec![BTreeMap::new(); blocks],
        }
    }

    fn blocks(&self) -> usize {
        self.dim.div_ceil(self.block_size)
    }

    fn range(&self, b: usize) -> std::ops::Range<usize> {
        b * self.block_size..((b + 1) * self.block_size).min(self.dim)
    }

    fn key(&self, level: usize, b: usize, q: &[f64]) -> u64 {
        let axis = Axis { hw: self.hw, res: self.levels[level] };
        self.range(b).fold(0u64, |acc, k| acc * axis.res as u64 + axis.cell(q[k]) as u64)
    }

    fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    fn decode(&self, b: usize, key: u64) -> Vec<usize> {
        let res = self.levels[self.finest()] as u64;
        let n = self.range(b).len();
        let mut c = vec![0; n];
        let mut rem = key;
        for k in (0..n).rev() {
            c[k] = (rem % res) as usize;
            rem /= res;
        }
        c
    }

    fn neighbour_keys(&self, b: usize, key: u64) -> Vec<u64> {
        let res = self.levels[self.finest()] as i64;
        let c = self.decode(b, key);
        let n = c.len();
        let mut out = Vec::new();
        for code in 0..3usize.pow(n as u32) {
            let mut rem = code;
            let mut ok = true;
            let mut k = 0u64;
            let mut zero = true;
            for &ci in &c {
                let off = (rem % 3) as i64 - 1;
                rem /= 3;
                zero &= off == 0;
                let x = ci as i64 + off;
                if x < 0 || x >= res {
                    ok = false;
                }
                k = k * res as u64 + x.max(0) as u64;
            }
            if ok && !zero {
                out.push(k);
            }
        }
        out
    }

    fn refresh_minimum(&mut self, b: usize, key: u64) {
        let fine = &self.cells[self.finest()][b];
        let Some(me) = fine.get(&key) else { return };
        let is_min = self
            .neighbour_keys(b, key)
            .iter()
            .all(|k| fine.get(k).map_or(true, |n| n.best_f >= me.best_f));
        self.minimum[b].insert(key, is_min);
    }

    fn write(&mut self, s: &EventSummary) {
        for level in 0..self.levels.len() {
            for b in 0..self.blocks() {
                let k = self.key(level, b, &s.q);
                self.cells[level][b].entry(k).or_default().update(s.f, s.g_norm);
            }
        }
        for b in 0..self.blocks() {
            let k = self.key(self.finest(), b, &s.q);
            self.refresh_minimum(b, k);
            for n in self.neighbour_keys(b, k) {
                self.refresh_minimum(b, n);
            }
        }
    }

    fn center(&self, b: usize, key: u64) -> Vec<f64> {
        let axis = Axis { hw: self.hw, res: self.levels[self.finest()] };
        self.decode(b, key).into_iter().map(|i| axis.center(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Memory {
    Disabled,
    Grid(GridMemory),
    Block(BlockMemory),
}

impl Memory {
    /// Grid memory for `dim <= 2`, block memory otherwise.
    pub fn new(dim: usize, half_width: f64, cfg: &MemoryConfig) -> Self {
        if !cfg.enabled {
            Memory::Disabled
        } else if dim <= 2 {
            Memory::Grid(GridMemory::new(dim, half_width, &cfg.grid_levels))
        } else {
            Memory::Block(BlockMemory::new(dim, half_width, cfg.block_size, &cfg.block_levels))
        }
    }

    pub fn levels(&self) -> usize {
        match self {
            Memory::Disabled => 0,
            Memory::Grid(g) => g.levels.len(),
            Memory::Block(b) => b.levels.len(),
        }
    }

    /// Length of [`Memory::read`].
    pub fn readout_len(&self) -> usize {
        CHANNELS * self.levels()
    }

    /// Per level: normalised occupancy, mean f, mean |g|, best f of the cell
    /// containing `q` (zeros when unvisited). Block memory averages over blocks.
    pub fn read(&self, q: &[f64]) -> Vec<f64> {
        match self {
            Memory::Disabled => Vec::new(),
            Memory::Grid(g) => {
                let mut out = Vec::with_capacity(self.readout_len());
                for level in 0..g.levels.len() {
                    out.extend(g.cells[level][g.index(level, q)].features());
                }
                out
            }
            Memory::Block(m) => {
                let mut out = vec![0.0; self.readout_len()];
                let nb = m.blocks() as f64;
                for level in 0..m.levels.len() {
                    for b in 0..m.blocks() {
                        if let Some(c) = m.cells[level][b].get(&m.key(level, b, q)) {
                            for (o, v) in out[CHANNELS * level..CHANNELS * (level + 1)].iter_mut().zip(c.features()) {
                                *o += v / nb;
                            }
                        }
                    }
                }
                out
            }
        }
    }

    pub fn write(&mut self, summary: &EventSummary, trigger: bool) {
        if !trigger {
            return;
        }
        match self {
            Memory::Disabled => {}
            Memory::Grid(g) => g.write(summary),
            Memory::Block(b) => b.write(summary),
        }
    }

    /// Finest-level occupancy at `q` (block memory: mean over blocks).
    pub fn occupancy(&self, q: &[f64]) -> f64 {
        match self {
            Memory::Disabled => 0.0,
            Memory::Grid(g) => g.cells[g.finest()][g.index(g.finest(), q)].occupancy as f64,
            Memory::Block(m) => {
                let f = m.finest();
                let total: u32 = (0..m.blocks())
                    .map(|b| m.cells[f][b].get(&m.key(f, b, q)).map_or(0, |c| c.occupancy))
                    .sum();
                total as f64 / m.blocks() as f64
            }
        }
    }

    /// `1 / (1 + occupancy)`.
    pub fn novelty(&self, q: &[f64]) -> f64 {
        1.0 / (1.0 + self.occupancy(q))
    }

    /// Total number of writes recorded at the finest level.
    pub fn total_writes(&self) -> u64 {
        match self {
            Memory::Disabled => 0,
            Memory::Grid(g) => g.cells[g.finest()].iter().map(|c| c.occupancy as u64).sum(),
            Memory::Block(m) => m.cells[m.finest()][0].values().map(|c| c.occupancy as u64).sum(),
        }
    }

    /// Finest cell width, used as the bump width.
    pub fn sigma(&self) -> f64 {
        match self {
            Memory::Disabled => 1.0,
            Memory::Grid(g) => 2.0 * g.hw / g.levels[g.finest()] as f64,
            Memory::Block(m) => 2.0 * m.hw / m.levels[m.finest()] as f64,
        }
    }

    /// Value and gradient of the memory bumps plus, in escape mode, the
    /// barrier bumps over cells that are minima of the recorded best f.
    pub fn potential(&self, q: &[f64], mode: Mode, cfg: &MemoryConfig) -> (f64, Vec<f64>) {
        let mut val = 0.0;
        let mut grad = vec![0.0; q.len()];
        let sigma = self.sigma();
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let escape = mode == Mode::Escape;
        let mut bump = |qs: &[f64], c: &[f64], occ: f64, is_min: bool, offset: usize, grad: &mut [f64]| {
            let r2: f64 = qs.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 * inv2s2 > 40.0 {
                return;
            }
            let w = cfg.w_mem + if escape && is_min { cfg.w_bar } else { 0.0 };
            let e = w * occ * (-r2 * inv2s2).exp();
            val += e;
            for (k, (a, b)) in qs.iter().zip(c).enumerate() {
                grad[offset + k] -= e * (a - b) / (sigma * sigma);
            }
        };
        match self {
            Memory::Disabled => {}
            Memory::Grid(g) => {
                let fine = &g.cells[g.finest()];
                for &i in &g.visited {
                    let c = g.center(i);
                    bump(&q[..g.dim], &c, fine[i].occupancy as f64, g.minimum[i], 0, &mut grad);
                }
            }
            Memory::Block(m) => {
                let f = m.finest();
                for b in 0..m.blocks() {
                    let r = m.range(b);
                    for (&key, stats) in &m.cells[f][b] {
                        let c = m.center(b, key);
                        let is_min = m.minimum[b].get(&key).copied().unwrap_or(false);
                        bump(&q[r.clone()], &c, stats.occupancy as f64, is_min, r.start, &mut grad);
                    }
                }
            }
        }
        (val, grad)
    }

    /// Cell statistics at `q` for each level (grid memory only).
    pub fn cell_stats(&self, q: &[f64]) -> Vec<CellStats> {
        match self {
            Memory::Grid(g) => (0..g.levels.len()).map(|l| g.cells[l][g.index(l, q)]).collect(),
            Memory::Block(m) => {
                (0..m.levels.len()).map(|l| m.cells[l][0].get(&m.key(l, 0, q)).copied().unwrap_or_default()).collect()
            }
            Memory::Disabled => Vec::new(),
        }
    }
}
