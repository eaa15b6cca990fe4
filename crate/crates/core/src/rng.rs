//! Counter-based noise.
//!
//! Streams are Philox4x32-10 (Salmon et al., "Parallel random numbers: as
//! easy as 1, 2, 3"). A stream is identified by a 64-bit key (the seed) and a
//! 64-bit stream id; block `n` of the stream is the Philox bijection applied
//! to the counter `[n_lo, n_hi, stream_lo, stream_hi]`. Each 128-bit block
//! yields four 32-bit words `w0..w3`.
//!
//! Scalar draws (`next_u64`, `next_normal`) use one 64-bit word per block,
//! `w0 << 32 | w1`, mapped to the open interval (0, 1) as
//! `((word >> 12) + 0.5) * 2^-52` and then through the inverse normal CDF
//! (Wichura's AS241 / PPND16, ~1e-16 relative accuracy).
//!
//! Tensor fills produce f32 and use every word: normal `i` of a draw is
//! word `i % 4` of block `base + i / 4`, mapped to (0, 1) as
//! `(word + 0.5) * 2^-32` and then through PPND7, the single-precision
//! variant of AS241 (~1e-7 relative), evaluated in f64 and rounded to f32.
//! Drawing `n` normals consumes `ceil(n / 4)` blocks, and a value depends
//! only on the draw's base block and `i`, so buffers may be filled in
//! parallel without changing the result. Bulk fills evaluate blocks in lane
//! batches; that is an evaluation order only, the values are those of the
//! scalar definition.

use rayon::prelude::*;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut key = key;
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let p0 = (PHILOX_M0 as u64) * (ctr[0] as u64);
        let p1 = (PHILOX_M1 as u64) * (ctr[2] as u64);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// SplitMix64 finalizer, also used as a cheap coordinate hash.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a 64-bit word to (0, 1), never hitting either endpoint.
pub fn word_to_open_unit(word: u64) -> f64 {
    ((word >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Inverse of the standard normal CDF (AS241, PPND16).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= CENTRAL_HALF_WIDTH {
        central_branch(q)
    } else {
        tail_branch(p, q)
    }
}

const CENTRAL_HALF_WIDTH: f64 = 0.425;

#[inline(always)]
fn central_branch(q: f64) -> f64 {
    let r = 0.180625 - q * q;
    let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
        + 6.726_577_092_700_87e4)
        * r
        + 4.592_195_393_154_987e4)
        * r
        + 1.373_169_376_550_946e4)
        * r
        + 1.971_590_950_306_551_3e3)
        * r
        + 1.331_416_678_917_843_8e2)
        * r
        + 3.387_132_872_796_366_5;
    let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
        + 3.930_789_580_009_271e4)
        * r
        + 2.121_379_430_158_659_7e4)
        * r
        + 5.394_196_021_424_751e3)
        * r
        + 6.871_870_074_920_579e2)
        * r
        + 4.231_333_070_160_091e1)
        * r
        + 1.0;
    q * num / den
}

fn tail_branch(p: f64, q: f64) -> f64 {
    let r = tail_radius(p, q);
    let value = if r <= 5.0 { tail_near(r) } else { tail_far(r) };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

#[inline(always)]
fn tail_radius(p: f64, q: f64) -> f64 {
    let tail = if q < 0.0 { p } else { 1.0 - p };
    (-tail.ln()).sqrt()
}

#[inline(always)]
fn tail_near(r: f64) -> f64 {
    let r = r - 1.6;
    let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
        + 2.417_807_251_774_506e-1)
        * r
        + 1.270_458_252_452_368_4)
        * r
        + 3.647_848_324_763_204_5)
        * r
        + 5.769_497_221_460_691)
        * r
        + 4.630_337_846_156_545)
        * r
        + 1.423_437_110_749_683_5;
    let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
        + 1.519_866_656_361_645_7e-2)
        * r
        + 1.481_039_764_274_800_8e-1)
        * r
        + 6.897_673_349_851e-1)
        * r
        + 1.676_384_830_183_803_8)
        * r
        + 2.053_191_626_637_759)
        * r
        + 1.0;
    num / den
}

fn tail_far(r: f64) -> f64 {
    let r = r - 5.0;
    let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
        + 1.242_660_947_388_078_4e-3)
        * r
        + 2.653_218_952_657_612_4e-2)
        * r
        + 2.965_605_718_285_048_7e-1)
        * r
        + 1.784_826_539_917_291_3)
        * r
        + 5.463_784_911_164_114)
        * r
        + 6.657_904_643_501_103;
    let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
        + 1.846_318_317_510_054_8e-5)
        * r
        + 7.868_691_311_456_133e-4)
        * r
        + 1.487_536_129_085_061_5e-2)
        * r
        + 1.369_298_809_227_358e-1)
        * r
        + 5.998_322_065_558_879e-1)
        * r
        + 1.0;
    num / den
}

/// Maps a 32-bit word to (0, 1) as `(word + 0.5) * 2^-32`, exactly.
pub fn word32_to_open_unit(word: u32) -> f64 {
    (word as f64 + 0.5) * (1.0 / 4_294_967_296.0)
}

/// Inverse of the standard normal CDF at single precision (AS241, PPND7).
pub fn inverse_normal_cdf7(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= CENTRAL_HALF_WIDTH {
        central7(q)
    } else {
        let r = tail_radius(p, q);
        let value = if r <= 5.0 { tail_near7(r) } else { tail_far7(r) };
        if q < 0.0 {
            -value
        } else {
            value
        }
    }
}

#[inline(always)]
fn central7(q: f64) -> f64 {
    let r = 0.180625 - q * q;
    let num = ((5.910_937_472_0e1 * r + 1.592_911_320_2e2) * r + 5.043_427_193_8e1) * r
        + 3.387_132_717_9;
    let den = ((6.718_756_360_0e1 * r + 7.875_775_766_4e1) * r + 1.789_516_946_9e1) * r + 1.0;
    q * num / den
}

#[inline(always)]
fn tail_near7(r: f64) -> f64 {
    let r = r - 1.6;
    let num = ((1.702_382_110_3e-1 * r + 1.306_728_481_6) * r + 2.756_815_390_0) * r
        + 1.423_437_277_7;
    let den = (1.202_113_297_5e-1 * r + 7.370_016_425_0e-1) * r + 1.0;
    num / den
}

fn tail_far7(r: f64) -> f64 {
    let r = r - 5.0;
    let num = ((1.733_720_399_7e-2 * r + 4.286_829_433_7e-1) * r + 3.081_226_386_0) * r
        + 6.657_905_115_0;
    let den = (1.225_820_263_5e-2 * r + 2.419_789_422_5e-1) * r + 1.0;
    num / den
}

/// Source of i.i.d. standard-normal variates.
pub trait NoiseSource {
    fn fill_normal(&mut self, out: &mut [f32]);

    /// Like [`fill_normal`](Self::fill_normal), but only elements with
    /// `select[i] == true` need to be written. The stream advances exactly as
    /// for a full fill, so skipping elements never changes later draws.
    fn fill_normal_selected(&mut self, out: &mut [f32], select: &[bool]) {
        let _ = select;
        self.fill_normal(out);
    }
}

const PAR_CHUNK: usize = 1 << 14;
/// Normals per lane batch; divides `PAR_CHUNK` and is a multiple of 4.
const BATCH: usize = 64;
const _: () = assert!(BATCH <= 64, "tail lanes are tracked in a u64");
const BATCH_BLOCKS: usize = BATCH / 4;

/// Philox over `BATCH_BLOCKS` consecutive counters in lane arrays, so the
/// rounds vectorize. Same output as calling [`philox4x32_10`] per block.
#[inline(always)]
fn philox_lanes(key: [u32; 2], stream: u64, first_block: u64) -> [[u32; BATCH_BLOCKS]; 4] {
    let mut c = [[0u32; BATCH_BLOCKS]; 4];
    for l in 0..BATCH_BLOCKS {
        let b = first_block.wrapping_add(l as u64);
        c[0][l] = b as u32;
        c[1][l] = (b >> 32) as u32;
        c[2][l] = stream as u32;
        c[3][l] = (stream >> 32) as u32;
    }
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        for l in 0..BATCH_BLOCKS {
            let p0 = (PHILOX_M0 as u64) * (c[0][l] as u64);
            let p1 = (PHILOX_M1 as u64) * (c[2][l] as u64);
            let n0 = (p1 >> 32) as u32 ^ c[1][l] ^ k[0];
            let n2 = (p0 >> 32) as u32 ^ c[3][l] ^ k[1];
            c[0][l] = n0;
            c[1][l] = p1 as u32;
            c[2][l] = n2;
            c[3][l] = p0 as u32;
        }
    }
    c
}

/// Fills `out` (at most `BATCH` long) with the normals of `BATCH_BLOCKS`
/// blocks starting at `first_block`. With `select`, tail lanes that are not
/// selected may be left holding a wrong value.
#[inline(always)]
fn normal_batch_body(
    key: [u32; 2],
    stream: u64,
    first_block: u64,
    out: &mut [f32],
    select: Option<&[bool]>,
) {
    let c = philox_lanes(key, stream, first_block);
    let mut u = [0.0f64; BATCH];
    for l in 0..BATCH_BLOCKS {
        for w in 0..4 {
            u[4 * l + w] = word32_to_open_unit(c[w][l]);
        }
    }
    let mut z = [0.0f64; BATCH];
    for j in 0..BATCH {
        z[j] = central7(u[j] - 0.5);
    }
    // lanes that need the tail formula, as a bit set
    let mut tail_bits = 0u64;
    for (j, &uj) in u.iter().enumerate() {
        tail_bits |= (((uj - 0.5).abs() > CENTRAL_HALF_WIDTH) as u64) << j;
    }
    if out.len() < BATCH {
        tail_bits &= (1u64 << out.len()) - 1;
    }
    if let Some(sel) = select {
        let mut wanted = 0u64;
        for (j, &s) in sel.iter().enumerate() {
            wanted |= (s as u64) << j;
        }
        tail_bits &= wanted;
    }
    // the tail branch, split so the polynomial runs across the gathered lanes
    let mut tails = [0usize; BATCH];
    let mut r = [0.0f64; BATCH];
    let mut n_tails = 0;
    while tail_bits != 0 {
        let j = tail_bits.trailing_zeros() as usize;
        tail_bits &= tail_bits - 1;
        tails[n_tails] = j;
        r[n_tails] = tail_radius(u[j], u[j] - 0.5);
        n_tails += 1;
    }
    let mut near = [0.0f64; BATCH];
    for k in 0..n_tails {
        near[k] = tail_near7(r[k]);
    }
    for (k, &j) in tails[..n_tails].iter().enumerate() {
        // a 32-bit uniform keeps r below 4.8, so the far branch is unreachable
        let value = if r[k] <= 5.0 { near[k] } else { tail_far7(r[k]) };
        z[j] = if u[j] - 0.5 < 0.0 { -value } else { value };
    }
    for (o, v) in out.iter_mut().zip(z) {
        *o = v as f32;
    }
}

fn normal_batch_generic(
    key: [u32; 2],
    stream: u64,
    first_block: u64,
    out: &mut [f32],
    select: Option<&[bool]>,
) {
    normal_batch_body(key, stream, first_block, out, select)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,avx512vl,avx2")]
unsafe fn normal_batch_avx512(
    key: [u32; 2],
    stream: u64,
    first_block: u64,
    out: &mut [f32],
    select: Option<&[bool]>,
) {
    normal_batch_body(key, stream, first_block, out, select)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn normal_batch_avx2(
    key: [u32; 2],
    stream: u64,
    first_block: u64,
    out: &mut [f32],
    select: Option<&[bool]>,
) {
    normal_batch_body(key, stream, first_block, out, select)
}

/// A Philox4x32-10 stream. See the module docs for the exact derivation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhiloxRng {
    key: [u32; 2],
    stream: u64,
    block: u64,
}

impl PhiloxRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            stream,
            block: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.key[0] as u64 | (self.key[1] as u64) << 32
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream keyed by `label`, starting at block 0.
    pub fn fork(&self, label: u64) -> Self {
        Self {
            key: self.key,
            stream: splitmix64(self.stream ^ splitmix64(label)),
            block: 0,
        }
    }

    fn block_words(&self, block: u64) -> [u64; 2] {
        let w = philox4x32_10(
            [
                block as u32,
                (block >> 32) as u32,
                self.stream as u32,
                (self.stream >> 32) as u32,
            ],
            self.key,
        );
        [
            (w[0] as u64) << 32 | w[1] as u64,
            (w[2] as u64) << 32 | w[3] as u64,
        ]
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.block_words(self.block);
        self.block += 1;
        w[0]
    }

    /// Uniform in (0, 1).
    pub fn next_unit(&mut self) -> f64 {
        word_to_open_unit(self.next_u64())
    }

    pub fn next_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_unit())
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn next_below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    fn fill_from(&self, base: u64, out: &mut [f32], select: Option<&[bool]>) {
        let fill_chunk = |chunk_index: usize, chunk: &mut [f32]| {
            let first = chunk_index * PAR_CHUNK;
            for (b, batch) in chunk.chunks_mut(BATCH).enumerate() {
                let i = first + b * BATCH;
                let sel = select.map(|sel| &sel[i..i + batch.len()]);
                if sel.is_some_and(|sel| !sel.contains(&true)) {
                    continue;
                }
                self.normal_batch(base + (i / 4) as u64, batch, sel);
            }
        };
        if out.len() > PAR_CHUNK {
            out.par_chunks_mut(PAR_CHUNK)
                .enumerate()
                .for_each(|(ci, chunk)| fill_chunk(ci, chunk));
        } else {
            fill_chunk(0, out);
        }
    }

    fn normal_batch(&self, first_block: u64, out: &mut [f32], select: Option<&[bool]>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512f")
            && std::arch::is_x86_feature_detected!("avx512dq")
            && std::arch::is_x86_feature_detected!("avx512vl")
        {
            // SAFETY: the features were just detected.
            return unsafe { normal_batch_avx512(self.key, self.stream, first_block, out, select) };
        }
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was just detected.
            return unsafe { normal_batch_avx2(self.key, self.stream, first_block, out, select) };
        }
        normal_batch_generic(self.key, self.stream, first_block, out, select)
    }

    fn reserve(&mut self, len: usize) -> u64 {
        let base = self.block;
        self.block += len.div_ceil(4) as u64;
        base
    }
}

impl NoiseSource for PhiloxRng {
    fn fill_normal(&mut self, out: &mut [f32]) {
        let base = self.reserve(out.len());
        self.fill_from(base, out, None);
    }

    fn fill_normal_selected(&mut self, out: &mut [f32], select: &[bool]) {
        assert_eq!(out.len(), select.len());
        let base = self.reserve(out.len());
        self.fill_from(base, out, Some(select));
    }
}

/// Every variate is the same constant. Test hook for closed-form checks.
#[derive(Debug, Clone, Copy)]
pub struct ConstantNoise(pub f32);

impl NoiseSource for ConstantNoise {
    fn fill_normal(&mut self, out: &mut [f32]) {
        out.fill(self.0);
    }
}
