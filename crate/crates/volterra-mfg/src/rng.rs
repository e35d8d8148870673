//! Counter-based random numbers (Philox 4x32-10).
//!
//! Every Gaussian increment is a pure function of `(seed, path, player, step)`,
//! so ensembles are bit-reproducible and samplable in any order without
//! stream coordination.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

/// Philox 4x32 with 10 rounds.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut x = ctr;
    let mut k = key;
    for _ in 0..10 {
        let p0 = (M0 as u64) * (x[0] as u64);
        let p1 = (M1 as u64) * (x[2] as u64);
        x = [
            ((p1 >> 32) as u32) ^ x[1] ^ k[0],
            p1 as u32,
            ((p0 >> 32) as u32) ^ x[3] ^ k[1],
            p0 as u32,
        ];
        k[0] = k[0].wrapping_add(W0);
        k[1] = k[1].wrapping_add(W1);
    }
    x
}

fn uniform_open(hi: u32, lo: u32) -> f64 {
    // 53-bit mantissa, offset by half an ulp: strictly inside (0, 1).
    let bits = ((hi as u64) << 32) | lo as u64;
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal draw keyed by `(seed, path, player, step)`.
pub fn standard_normal(seed: u64, path: u64, player: u32, step: u32) -> f64 {
    let ctr = [path as u32, (path >> 32) as u32, player, step];
    let key = [seed as u32, (seed >> 32) as u32];
    let out = philox4x32_10(ctr, key);
    let u1 = uniform_open(out[0], out[1]);
    let u2 = uniform_open(out[2], out[3]);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Reserved player id for the summed increments of "all remaining players"
/// in the reduced population sampler.
pub const REST_OF_POPULATION: u32 = u32::MAX;
