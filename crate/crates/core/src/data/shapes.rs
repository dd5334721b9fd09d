//! Procedural two-tone room with one coloured glyph: a small stand-in for 3D Shapes
//! with the same factor cardinalities and hue structure.

pub const SIZE: usize = 64;
pub const HUES: usize = 10;
pub const SCALES: usize = 8;
pub const SHAPES: usize = 4;
pub const ORIENTATIONS: usize = 15;
pub const ORIENTATION_STEP_DEG: f64 = 12.0;

/// Ground-truth factor names and cardinalities, in enumeration order (last varies fastest).
pub const FACTORS: [(&str, usize); 6] = [
    ("floor_hue", HUES),
    ("wall_hue", HUES),
    ("object_hue", HUES),
    ("scale", SCALES),
    ("shape", SHAPES),
    ("orientation", ORIENTATIONS),
];

pub const TOTAL: usize = HUES * HUES * HUES * SCALES * SHAPES * ORIENTATIONS;

pub const WALL_PROBE: (usize, usize) = (8, 8);
pub const FLOOR_PROBE: (usize, usize) = (60, 8);
pub const OBJECT_PROBE: (usize, usize) = (44, 32);
const CENTER: (f64, f64) = (44.0, 32.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Square,
    Disk,
    Triangle,
    Cross,
}

impl Glyph {
    pub fn from_index(i: usize) -> Glyph {
        [Glyph::Square, Glyph::Disk, Glyph::Triangle, Glyph::Cross][i]
    }

    /// Membership of glyph-frame point (u right, v up) for half-extent `h`.
    fn contains(self, u: f64, v: f64, h: f64) -> bool {
        match self {
            Glyph::Square => u.abs() <= h && v.abs() <= h,
            Glyph::Disk => u * u + v * v <= h * h,
            Glyph::Triangle => v >= -h && v <= h && u.abs() <= (h - v) / 2.0,
            Glyph::Cross => {
                let arm = h / 3.0;
                (u.abs() <= arm && v.abs() <= h) || (v.abs() <= arm && u.abs() <= h)
            }
        }
    }
}

/// Fully saturated, full-value hue `k / 10` as rounded RGB bytes.
pub fn palette() -> [[u8; 3]; HUES] {
    let mut out = [[0u8; 3]; HUES];
    for (k, rgb) in out.iter_mut().enumerate() {
        let h = k as f64 / HUES as f64 * 6.0;
        let sector = h.floor() as usize % 6;
        let f = h - h.floor();
        let (r, g, b) = match sector {
            0 => (1.0, f, 0.0),
            1 => (1.0 - f, 1.0, 0.0),
            2 => (0.0, 1.0, f),
            3 => (0.0, 1.0 - f, 1.0),
            4 => (f, 0.0, 1.0),
            _ => (1.0, 0.0, 1.0 - f),
        };
        *rgb = [r, g, b].map(|c: f64| (c * 255.0).round() as u8);
    }
    out
}

/// Mean Euclidean RGB distance between cyclically adjacent palette entries, on the byte scale.
pub fn adjacent_hue_distance() -> f64 {
    let p = palette();
    let mut total = 0.0;
    for k in 0..HUES {
        let a = p[k];
        let b = p[(k + 1) % HUES];
        total += (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum::<f64>().sqrt();
    }
    total / HUES as f64
}

/// Factor tuple of enumeration index `idx`.
pub fn decode(mut idx: usize) -> [u8; 6] {
    let mut t = [0u8; 6];
    for f in (0..6).rev() {
        let m = FACTORS[f].1;
        t[f] = (idx % m) as u8;
        idx /= m;
    }
    t
}

pub fn encode(t: &[u8; 6]) -> usize {
    t.iter().zip(FACTORS).fold(0, |acc, (&v, (_, m))| acc * m + v as usize)
}

/// Renders `t` as channel-major RGB bytes into `out` (length 3·64·64).
pub fn render(t: &[u8; 6], out: &mut [u8]) {
    let pal = palette();
    let plane = SIZE * SIZE;
    let [floor, wall, object, scale, shape, orient] = t.map(usize::from);
    for r in 0..SIZE {
        let rgb = if r < SIZE / 2 { pal[wall] } else { pal[floor] };
        for (c, &v) in rgb.iter().enumerate() {
            out[c * plane + r * SIZE..c * plane + (r + 1) * SIZE].fill(v);
        }
    }
    let h = 6.0 + scale as f64;
    let glyph = Glyph::from_index(shape);
    let theta = (orient as f64 * ORIENTATION_STEP_DEG).to_radians();
    let (s, co) = theta.sin_cos();
    let reach = (h * std::f64::consts::SQRT_2).ceil() as isize + 1;
    let (cr, cc) = (CENTER.0 as isize, CENTER.1 as isize);
    for r in (cr - reach).max(0)..(cr + reach + 1).min(SIZE as isize) {
        for c in (cc - reach).max(0)..(cc + reach + 1).min(SIZE as isize) {
            let u = c as f64 - CENTER.1;
            let v = CENTER.0 - r as f64;
            // rotate the pixel back into the glyph frame
            let gu = u * co + v * s;
            let gv = -u * s + v * co;
            // the disk is tested unrotated so boundary pixels cannot flicker with orientation
            let inside = match glyph {
                Glyph::Disk => glyph.contains(u, v, h),
                _ => glyph.contains(gu, gv, h),
            };
            if inside {
                let p = r as usize * SIZE + c as usize;
                for ch in 0..3 {
                    out[ch * plane + p] = pal[object][ch];
                }
            }
        }
    }
}

/// Probe pixel whose colour reveals the given ground-truth factor, if any.
pub fn probe(factor: &str) -> Option<(usize, usize)> {
    match factor {
        "wall_hue" => Some(WALL_PROBE),
        "floor_hue" => Some(FLOOR_PROBE),
        "object_hue" => Some(OBJECT_PROBE),
        _ => None,
    }
}

/// Keeps tuples whose floor and wall hues differ by at most one step, cyclically.
pub fn is_correlated(t: &[u8; 6]) -> bool {
    matches!((t[0] as usize + HUES - t[1] as usize) % HUES, 0 | 1 | 9)
}
