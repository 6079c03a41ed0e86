//! Token-lattice masks.
//!
//! Masks are defined on the patch-token grid, not on pixels. A checkerboard
//! cell of `c` tokens covers `c * p` pixels per side for token patch size `p`,
//! so with 16-pixel tokens a 16×16-pixel mask square is cell 1 and a
//! 32×32-pixel square is cell 2.
//!
//! Text serialization (used by the CLI and test fixtures) is one header line
//! `h w strategy cell phase ratio seed` followed by `h` rows of `0`/`1`
//! characters, `1` meaning masked. Fields that are meaningless for a strategy
//! carry sentinels: `cell = 0`, `phase = -`, `seed = 0`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Which checkerboard parity is masked. `Even` masks the cell at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Even,
    Odd,
}

impl Phase {
    fn bit(self) -> usize {
        match self {
            Phase::Even => 0,
            Phase::Odd => 1,
        }
    }

    pub fn flip(self) -> Phase {
        match self {
            Phase::Even => Phase::Odd,
            Phase::Odd => Phase::Even,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Even => "even",
            Phase::Odd => "odd",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(Phase::Even),
            "odd" => Ok(Phase::Odd),
            other => Err(Error::config(format!("unknown phase '{other}' (expected even|odd)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Checkerboard,
    Random,
    Block,
    Central,
    /// Produced by combining other masks (e.g. [`intersect`]).
    Derived,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Checkerboard => "checkerboard",
            Strategy::Random => "random",
            Strategy::Block => "block",
            Strategy::Central => "central",
            Strategy::Derived => "derived",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(Strategy::Checkerboard),
            "random" => Ok(Strategy::Random),
            "block" => Ok(Strategy::Block),
            "central" => Ok(Strategy::Central),
            "derived" => Ok(Strategy::Derived),
            other => Err(Error::config(format!("unknown mask strategy '{other}'"))),
        }
    }
}

/// How a mask was produced.
///
/// Sentinels for fields a strategy does not use: `cell_size = 0`,
/// `phase = None`, `seed = 0`. Checkerboard masks always carry
/// `ratio_target = 0.5`; derived masks carry their realized ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskProvenance {
    pub strategy: Strategy,
    pub cell_size: usize,
    pub phase: Option<Phase>,
    pub ratio_target: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    grid_h: usize,
    grid_w: usize,
    bits: Vec<bool>,
    provenance: MaskProvenance,
}

impl TokenMask {
    fn from_bits(grid_h: usize, grid_w: usize, bits: Vec<bool>, provenance: MaskProvenance) -> Self {
        debug_assert_eq!(bits.len(), grid_h * grid_w);
        Self {
            grid_h,
            grid_w,
            bits,
            provenance,
        }
    }

    /// A mask with no masked tokens, tagged as a zero-ratio central mask.
    pub fn all_visible(grid_h: usize, grid_w: usize) -> Self {
        central_mask(grid_h, grid_w, 0.0).expect("zero ratio is always valid")
    }

    /// Builds a derived mask from an explicit bit vector (row-major).
    pub fn from_raw(grid_h: usize, grid_w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid_h * grid_w {
            return Err(Error::shape(format!(
                "{} bits for a {grid_h}x{grid_w} grid",
                bits.len()
            )));
        }
        let masked = bits.iter().filter(|b| **b).count();
        let total = (grid_h * grid_w).max(1);
        Ok(Self::from_bits(
            grid_h,
            grid_w,
            bits,
            derived_provenance(masked as f64 / total as f64),
        ))
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn provenance(&self) -> &MaskProvenance {
        &self.provenance
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.grid_w + col]
    }

    /// Masked state of token `index` in row-major order.
    pub fn is_masked(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Row-major indices of masked tokens.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    pub fn ratio(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.masked_count() as f64 / self.bits.len() as f64
    }

    pub fn complement(&self) -> TokenMask {
        let bits: Vec<bool> = self.bits.iter().map(|b| !b).collect();
        let mut provenance = self.provenance;
        match (provenance.strategy, provenance.phase) {
            (Strategy::Checkerboard, Some(p)) => provenance.phase = Some(p.flip()),
            _ => provenance = derived_provenance(1.0 - self.ratio()),
        }
        TokenMask::from_bits(self.grid_h, self.grid_w, bits, provenance)
    }

    /// Toroidal translation by `(dr, dc)` tokens: the token at `(i, j)` moves to
    /// `(i + dr, j + dc)` modulo the grid.
    pub fn roll(&self, dr: usize, dc: usize) -> TokenMask {
        let (h, w) = (self.grid_h, self.grid_w);
        let mut bits = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                bits[((i + dr) % h) * w + (j + dc) % w] = self.bits[i * w + j];
            }
        }
        TokenMask::from_bits(h, w, bits, derived_provenance(self.ratio()))
    }

    pub fn to_text(&self) -> String {
        let p = &self.provenance;
        let phase = p.phase.map_or_else(|| "-".to_string(), |ph| ph.to_string());
        let mut out = format!(
            "{} {} {} {} {} {} {}\n",
            self.grid_h, self.grid_w, p.strategy, p.cell_size, phase, p.ratio_target, p.seed
        );
        for row in self.bits.chunks(self.grid_w.max(1)) {
            out.extend(row.iter().map(|b| if *b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TokenMask> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty mask text".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("mask header needs 7 fields, got '{header}'")));
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad {what} '{s}' in mask header")))
        };
        let grid_h = num(fields[0], "h")? as usize;
        let grid_w = num(fields[1], "w")? as usize;
        let strategy: Strategy = fields[2].parse()?;
        let cell_size = num(fields[3], "cell")? as usize;
        let phase = match fields[4] {
            "-" => None,
            s => Some(s.parse()?),
        };
        let ratio_target: f64 = fields[5]
            .parse()
            .map_err(|_| Error::Data(format!("bad ratio '{}'", fields[5])))?;
        let seed = num(fields[6], "seed")?;

        let mut bits = Vec::with_capacity(grid_h * grid_w);
        for r in 0..grid_h {
            let line = lines
                .next()
                .ok_or_else(|| Error::Data(format!("mask text ends before row {r}")))?;
            if line.len() != grid_w {
                return Err(Error::Data(format!("row {r} has {} columns, expected {grid_w}", line.len())));
            }
            for ch in line.chars() {
                bits.push(match ch {
                    '0' => false,
                    '1' => true,
                    c => return Err(Error::Data(format!("invalid mask character '{c}'"))),
                });
            }
        }
        Ok(TokenMask::from_bits(
            grid_h,
            grid_w,
            bits,
            MaskProvenance {
                strategy,
                cell_size,
                phase,
                ratio_target,
                seed,
            },
        ))
    }
}

fn derived_provenance(ratio: f64) -> MaskProvenance {
    MaskProvenance {
        strategy: Strategy::Derived,
        cell_size: 0,
        phase: None,
        ratio_target: ratio,
        seed: 0,
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

fn target_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).round() as usize).min(total)
}

pub fn checkerboard_mask(grid_h: usize, grid_w: usize, cell_size: usize, phase: Phase) -> Result<TokenMask> {
    if cell_size == 0 {
        return Err(Error::config("checkerboard cell_size must be at least 1"));
    }
    if grid_h % cell_size != 0 {
        return Err(Error::config(format!(
            "checkerboard cell_size {cell_size} does not divide grid height {grid_h}"
        )));
    }
    if grid_w % cell_size != 0 {
        return Err(Error::config(format!(
            "checkerboard cell_size {cell_size} does not divide grid width {grid_w}"
        )));
    }
    let parity = phase.bit();
    let bits = (0..grid_h)
        .flat_map(|i| (0..grid_w).map(move |j| (i / cell_size + j / cell_size) % 2 == parity))
        .collect();
    Ok(TokenMask::from_bits(
        grid_h,
        grid_w,
        bits,
        MaskProvenance {
            strategy: Strategy::Checkerboard,
            cell_size,
            phase: Some(phase),
            ratio_target: 0.5,
            seed: 0,
        },
    ))
}

/// Masks exactly `round(ratio * N)` tokens.
///
/// Sampling is a partial Fisher-Yates shuffle over the row-major index list
/// driven by `ChaCha8Rng::seed_from_u64(seed)`: for `i` in `0..k`, draw
/// `j = gen_range(i..N)` and swap positions `i` and `j`; the first `k` entries
/// are masked.
pub fn random_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<TokenMask> {
    check_ratio(ratio)?;
    let n = grid_h * grid_w;
    let k = target_count(ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut bits = vec![false; n];
    for &idx in &order[..k] {
        bits[idx] = true;
    }
    Ok(TokenMask::from_bits(
        grid_h,
        grid_w,
        bits,
        MaskProvenance {
            strategy: Strategy::Random,
            cell_size: 0,
            phase: None,
            ratio_target: ratio,
            seed,
        },
    ))
}

/// Side length (tokens) of the square blocks placed by [`block_mask`].
pub fn block_side(grid_h: usize, grid_w: usize) -> usize {
    (grid_h.min(grid_w) / 4).max(1)
}

/// Places square blocks of side [`block_side`] until the masked count first
/// reaches `round(ratio * N)`.
///
/// Each block's top-left corner is drawn as `row = gen_range(0..=h-side)` then
/// `col = gen_range(0..=w-side)` from `ChaCha8Rng::seed_from_u64(seed)`.
/// Blocks may overlap already-masked tokens, so the final count lies in
/// `[target, target + side² - 1]`.
pub fn block_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<TokenMask> {
    check_ratio(ratio)?;
    let n = grid_h * grid_w;
    let target = target_count(ratio, n);
    let mut bits = vec![false; n];
    let side = block_side(grid_h, grid_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    while count < target {
        let r0 = rng.gen_range(0..=grid_h - side);
        let c0 = rng.gen_range(0..=grid_w - side);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                let b = &mut bits[r * grid_w + c];
                if !*b {
                    *b = true;
                    count += 1;
                }
            }
        }
    }
    Ok(TokenMask::from_bits(
        grid_h,
        grid_w,
        bits,
        MaskProvenance {
            strategy: Strategy::Block,
            cell_size: 0,
            phase: None,
            ratio_target: ratio,
            seed,
        },
    ))
}

/// Masks the centered square of side `floor(sqrt(ratio * N))`, clipped to
/// the shorter grid side. The top-left corner is `((h - s) / 2, (w - s) / 2)`
/// with integer division.
pub fn central_mask(grid_h: usize, grid_w: usize, ratio: f64) -> Result<TokenMask> {
    check_ratio(ratio)?;
    let n = grid_h * grid_w;
    let side = ((ratio * n as f64).sqrt().floor() as usize).min(grid_h.min(grid_w));
    let r0 = (grid_h - side) / 2;
    let c0 = (grid_w - side) / 2;
    let bits = (0..grid_h)
        .flat_map(|i| (0..grid_w).map(move |j| (r0..r0 + side).contains(&i) && (c0..c0 + side).contains(&j)))
        .collect();
    Ok(TokenMask::from_bits(
        grid_h,
        grid_w,
        bits,
        MaskProvenance {
            strategy: Strategy::Central,
            cell_size: 0,
            phase: None,
            ratio_target: ratio,
            seed: 0,
        },
    ))
}

pub fn intersect(a: &TokenMask, b: &TokenMask) -> Result<TokenMask> {
    if a.grid_h != b.grid_h || a.grid_w != b.grid_w {
        return Err(Error::shape(format!(
            "cannot intersect {}x{} mask with {}x{} mask",
            a.grid_h, a.grid_w, b.grid_h, b.grid_w
        )));
    }
    let bits: Vec<bool> = a.bits.iter().zip(&b.bits).map(|(x, y)| *x && *y).collect();
    let masked = bits.iter().filter(|v| **v).count();
    let ratio = if bits.is_empty() { 0.0 } else { masked as f64 / bits.len() as f64 };
    Ok(TokenMask::from_bits(a.grid_h, a.grid_w, bits, derived_provenance(ratio)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub ratio: f64,
    /// Horizontal run length of masked tokens → number of such runs.
    pub run_length_histogram: BTreeMap<usize, usize>,
    /// Fraction of masked tokens with at least one masked 4-neighbor (0 for an empty mask).
    pub adjacency_fraction: f64,
}

pub fn mask_stats(mask: &TokenMask) -> MaskStats {
    let (h, w) = (mask.grid_h, mask.grid_w);
    let mut hist = BTreeMap::new();
    for row in mask.bits.chunks(w.max(1)) {
        let mut run = 0;
        for &b in row.iter().chain(std::iter::once(&false)) {
            if b {
                run += 1;
            } else if run > 0 {
                *hist.entry(run).or_insert(0) += 1;
                run = 0;
            }
        }
    }

    let mut masked = 0usize;
    let mut touching = 0usize;
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            masked += 1;
            let neighbor = (i > 0 && mask.get(i - 1, j))
                || (i + 1 < h && mask.get(i + 1, j))
                || (j > 0 && mask.get(i, j - 1))
                || (j + 1 < w && mask.get(i, j + 1));
            if neighbor {
                touching += 1;
            }
        }
    }
    MaskStats {
        ratio: mask.ratio(),
        run_length_histogram: hist,
        adjacency_fraction: if masked == 0 { 0.0 } else { touching as f64 / masked as f64 },
    }
}

/// A mask recipe that can be instantiated on any compatible grid.
///
/// Text form: `checkerboard:<cell>[:<phase>]`, `random@<ratio>`,
/// `block@<ratio>`, `central@<ratio>`. A checkerboard without a phase draws
/// its phase from the generator's random stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSpec {
    Checkerboard { cell: usize, phase: Option<Phase> },
    Random { ratio: f64 },
    Block { ratio: f64 },
    Central { ratio: f64 },
}

impl MaskSpec {
    pub fn strategy(&self) -> Strategy {
        match self {
            MaskSpec::Checkerboard { .. } => Strategy::Checkerboard,
            MaskSpec::Random { .. } => Strategy::Random,
            MaskSpec::Block { .. } => Strategy::Block,
            MaskSpec::Central { .. } => Strategy::Central,
        }
    }

    /// Checks that this recipe can be instantiated on a `grid_h × grid_w` lattice.
    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        match *self {
            MaskSpec::Checkerboard { cell, .. } => checkerboard_mask(grid_h, grid_w, cell, Phase::Even).map(|_| ()),
            MaskSpec::Random { ratio } | MaskSpec::Block { ratio } | MaskSpec::Central { ratio } => check_ratio(ratio),
        }
    }

    /// Draws a concrete mask, consuming randomness from `rng` for the phase or seed.
    pub fn sample<R: Rng>(&self, grid_h: usize, grid_w: usize, rng: &mut R) -> Result<TokenMask> {
        match *self {
            MaskSpec::Checkerboard { cell, phase } => {
                let phase = phase.unwrap_or_else(|| if rng.gen::<bool>() { Phase::Odd } else { Phase::Even });
                checkerboard_mask(grid_h, grid_w, cell, phase)
            }
            MaskSpec::Random { ratio } => random_mask(grid_h, grid_w, ratio, rng.gen()),
            MaskSpec::Block { ratio } => block_mask(grid_h, grid_w, ratio, rng.gen()),
            MaskSpec::Central { ratio } => central_mask(grid_h, grid_w, ratio),
        }
    }

    /// File-name friendly label, e.g. `checkerboard_2` or `random_0.75`.
    pub fn label(&self) -> String {
        match *self {
            MaskSpec::Checkerboard { cell, .. } => format!("checkerboard_{cell}"),
            MaskSpec::Random { ratio } => format!("random_{ratio}"),
            MaskSpec::Block { ratio } => format!("block_{ratio}"),
            MaskSpec::Central { ratio } => format!("central_{ratio}"),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MaskSpec::Checkerboard { cell, phase: None } => write!(f, "checkerboard:{cell}"),
            MaskSpec::Checkerboard { cell, phase: Some(p) } => write!(f, "checkerboard:{cell}:{p}"),
            MaskSpec::Random { ratio } => write!(f, "random@{ratio}"),
            MaskSpec::Block { ratio } => write!(f, "block@{ratio}"),
            MaskSpec::Central { ratio } => write!(f, "central@{ratio}"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("invalid mask spec '{s}'"));
        if let Some(rest) = s.strip_prefix("checkerboard:") {
            let mut parts = rest.split(':');
            let cell = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let phase = parts.next().map(str::parse).transpose()?;
            if parts.next().is_some() {
                return Err(bad());
            }
            return Ok(MaskSpec::Checkerboard { cell, phase });
        }
        let (name, ratio) = s.split_once('@').ok_or_else(bad)?;
        let ratio: f64 = ratio.parse().map_err(|_| bad())?;
        check_ratio(ratio)?;
        match name {
            "random" => Ok(MaskSpec::Random { ratio }),
            "block" => Ok(MaskSpec::Block { ratio }),
            "central" => Ok(MaskSpec::Central { ratio }),
            _ => Err(bad()),
        }
    }
}
