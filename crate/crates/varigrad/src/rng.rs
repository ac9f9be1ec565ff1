use crate::tensor::Matrix;

const GAMMA: u64 = 0x9E3779B97F4A7C15;

/// 64-bit avalanche finalizer; bijective, so distinct inputs stay distinct.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Counter-based random stream.
///
/// Output n of stream (seed, stream_id) is `mix64(key + n*GAMMA)` with
/// `key = mix64(mix64(seed) ^ mix64(stream_id ^ SALT))`: a pure function of
/// (seed, stream_id, counter), so sequences are identical across platforms
/// and any draw can be regenerated by replaying the counter. Distinct
/// stream_ids give statistically independent sequences. Single-owner: share
/// work across tasks by deriving child streams, never by sharing one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    key: u64,
    counter: u64,
}

const STREAM_SALT: u64 = 0x6A09E667F3BCC909;
const SUBSTREAM_SALT: u64 = 0xBB67AE8584CAA73B;

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> RngStream {
        let key = mix64(mix64(seed) ^ mix64(stream_id ^ STREAM_SALT));
        RngStream { seed, stream_id, key, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream; deterministic in (parent identity, id).
    /// The child starts at counter 0 and does not advance the parent.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream_id ^ SUBSTREAM_SALT).wrapping_add(mix64(id)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on the open interval (0, 1); 53-bit resolution, never 0 or 1,
    /// so it is always a valid quantile-function argument.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw via the inverse CDF; exactly one counter tick,
    /// which keeps (seed, stream, counter) -> value replayable draw-by-draw.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        normal_quantile(self.next_uniform())
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift keeps this unbiased within ~2^-53 for desk-scale n.
        (self.next_uniform() * n as f64) as usize % n
    }
}

/// i.i.d. standard normal matrix; advances `rng` by rows*cols draws.
pub fn sample_standard_normal(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for x in m.data_mut() {
        *x = rng.next_normal();
    }
    m
}

/// Inverse of the standard normal CDF (Wichura's PPND16 rational
/// approximations), |error| < 1e-15 over (0, 1). Deterministic and
/// platform-stable, unlike rejection samplers.
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly7(r, &A_CENT) / poly7(r, &B_CENT);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly7(r, &C_TAIL) / poly7(r, &D_TAIL)
    } else {
        r -= 5.0;
        poly7(r, &E_FAR) / poly7(r, &F_FAR)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[inline]
fn poly7(r: f64, c: &[f64; 8]) -> f64 {
    ((((((c[7] * r + c[6]) * r + c[5]) * r + c[4]) * r + c[3]) * r + c[2]) * r + c[1]) * r + c[0]
}

const A_CENT: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const B_CENT: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const C_TAIL: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const D_TAIL: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const E_FAR: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const F_FAR: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];
