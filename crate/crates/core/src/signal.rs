//! Synthetic transmitter population and frame generation.
//!
//! Every device carries a fixed set of hardware impairments. A frame is an
//! on/off keyed burst (fixed preamble plus pulse-position data bits) pushed
//! through the device's impairment chain and an AWGN channel. The paired
//! reconstruction is the same burst with no impairments and no noise.
//!
//! Samples are rounded to `f32` precision at generation time so frames
//! survive the on-disk record format bit-exactly.

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Frame length after filtering.
pub const FRAME_LEN: usize = 112;

const PREAMBLE_LEN: usize = 48;
const BIT_LEN: usize = 8;
const PREAMBLE_PULSES: [usize; 4] = [0, 8, 28, 36];
const PULSE_LEN: usize = 4;

const CARRIER_HZ: f64 = 1090e6;
const SAMPLE_RATE_HZ: f64 = 10e6;

/// Half-widths of the uniform impairment ranges, also used to normalize
/// profile separation.
pub const CFO_PPM_RANGE: f64 = 10.0;
pub const IQ_GAIN_DB_RANGE: f64 = 1.5;
pub const IQ_SKEW_RAD_RANGE: f64 = 0.2;
pub const DC_RANGE: f64 = 0.1;
pub const NONLINEARITY_RANGE: f64 = 0.15;

/// Minimum Chebyshev distance between two profiles, in units of the range
/// half-widths above.
pub const DEFAULT_MIN_SEPARATION: f64 = 0.02;

pub const DEFAULT_SNR_DB: (f64, f64) = (10.0, 30.0);

/// Number of data bits that fit after the preamble of a frame of length `len`.
pub fn payload_bits_for(len: usize) -> usize {
    len.saturating_sub(PREAMBLE_LEN) / BIT_LEN
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProfile {
    pub device_id: u32,
    pub carrier_offset_ppm: f64,
    pub iq_gain_imbalance_db: f64,
    pub iq_phase_skew_rad: f64,
    pub dc_offset: Complex64,
    pub nonlinearity_coeff: f64,
}

impl DeviceProfile {
    /// Profile with no impairments at all.
    pub fn ideal(device_id: u32) -> Self {
        Self {
            device_id,
            carrier_offset_ppm: 0.0,
            iq_gain_imbalance_db: 0.0,
            iq_phase_skew_rad: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            nonlinearity_coeff: 0.0,
        }
    }

    fn normalized(&self) -> [f64; 6] {
        [
            self.carrier_offset_ppm / CFO_PPM_RANGE,
            self.iq_gain_imbalance_db / IQ_GAIN_DB_RANGE,
            self.iq_phase_skew_rad / IQ_SKEW_RAD_RANGE,
            self.dc_offset.re / DC_RANGE,
            self.dc_offset.im / DC_RANGE,
            self.nonlinearity_coeff / NONLINEARITY_RANGE,
        ]
    }

    /// Largest normalized difference in any single impairment.
    pub fn separation(&self, other: &DeviceProfile) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Carrier offset as a per-sample phase increment in radians.
    pub fn phase_step(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.carrier_offset_ppm * 1e-6 * CARRIER_HZ / SAMPLE_RATE_HZ
    }

    fn impair(&self, clean: &[Complex64]) -> Vec<Complex64> {
        let g = 10f64.powf(self.iq_gain_imbalance_db / 20.0).sqrt();
        let (sin_phi, cos_phi) = self.iq_phase_skew_rad.sin_cos();
        let step = self.phase_step();
        clean
            .iter()
            .enumerate()
            .map(|(n, s)| {
                let iq = Complex64::new(g * s.re, (s.im * cos_phi + s.re * sin_phi) / g);
                let ramped = iq * Complex64::from_polar(1.0, step * n as f64);
                let v = ramped + self.dc_offset;
                v + self.nonlinearity_coeff * v.norm_sqr() * v
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalFrame {
    pub samples: Vec<Complex64>,
    pub device_id: u32,
    pub snr_db: f64,
}

impl SignalFrame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacked real layout `[I_0..I_{L-1}, Q_0..Q_{L-1}]`.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend(self.samples.iter().map(|s| s.re));
        out.extend(self.samples.iter().map(|s| s.im));
        out
    }
}

/// An impaired frame and its fingerprint-free reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub x: SignalFrame,
    pub x_hat: SignalFrame,
}

/// Draw `n_devices` profiles, pairwise separated by more than
/// [`DEFAULT_MIN_SEPARATION`]. Device ids are `first_id..first_id + n`.
pub fn generate_population(n_devices: usize, first_id: u32, rng: &mut Rng) -> Result<Vec<DeviceProfile>> {
    generate_population_with(n_devices, first_id, DEFAULT_MIN_SEPARATION, rng)
}

pub fn generate_population_with(
    n_devices: usize,
    first_id: u32,
    min_separation: f64,
    rng: &mut Rng,
) -> Result<Vec<DeviceProfile>> {
    if n_devices == 0 {
        return Err(Error::InvalidArgument("population needs at least one device".into()));
    }
    if !(0.0..1.0).contains(&min_separation) {
        return Err(Error::InvalidArgument(format!(
            "min separation {min_separation} must be in [0, 1)"
        )));
    }
    let mut out: Vec<DeviceProfile> = Vec::with_capacity(n_devices);
    let mut attempts = 0usize;
    while out.len() < n_devices {
        attempts += 1;
        if attempts > 1000 * n_devices + 10_000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {n_devices} devices at separation {min_separation}"
            )));
        }
        let candidate = DeviceProfile {
            device_id: first_id + out.len() as u32,
            carrier_offset_ppm: rng.uniform_range(-CFO_PPM_RANGE, CFO_PPM_RANGE),
            iq_gain_imbalance_db: rng.uniform_range(-IQ_GAIN_DB_RANGE, IQ_GAIN_DB_RANGE),
            iq_phase_skew_rad: rng.uniform_range(-IQ_SKEW_RAD_RANGE, IQ_SKEW_RAD_RANGE),
            dc_offset: Complex64::new(
                rng.uniform_range(-DC_RANGE, DC_RANGE),
                rng.uniform_range(-DC_RANGE, DC_RANGE),
            ),
            nonlinearity_coeff: rng.uniform_range(-NONLINEARITY_RANGE, NONLINEARITY_RANGE),
        };
        if out.iter().all(|p| p.separation(&candidate) > min_separation) {
            out.push(candidate);
        }
    }
    Ok(out)
}

pub fn random_payload(len: usize, rng: &mut Rng) -> Vec<bool> {
    (0..payload_bits_for(len)).map(|_| rng.bit()).collect()
}

/// Noise-free, impairment-free baseband burst for `payload`.
pub fn clean_burst(payload: &[bool], len: usize) -> Result<Vec<Complex64>> {
    if len < PREAMBLE_LEN + BIT_LEN || payload.len() != payload_bits_for(len) {
        return Err(Error::InvalidArgument(format!(
            "payload of {} bits does not fit a frame of {len} samples (expected {})",
            payload.len(),
            payload_bits_for(len)
        )));
    }
    let mut on = vec![0.0f64; len];
    for &p in &PREAMBLE_PULSES {
        on[p..p + PULSE_LEN].iter_mut().for_each(|v| *v = 1.0);
    }
    for (i, &bit) in payload.iter().enumerate() {
        let start = PREAMBLE_LEN + i * BIT_LEN + if bit { 0 } else { BIT_LEN / 2 };
        on[start..start + BIT_LEN / 2].iter_mut().for_each(|v| *v = 1.0);
    }
    // [1 2 1]/4 pulse shaping
    let shaped = (0..len).map(|n| {
        let prev = if n > 0 { on[n - 1] } else { 0.0 };
        let next = if n + 1 < len { on[n + 1] } else { 0.0 };
        Complex64::new(0.25 * prev + 0.5 * on[n] + 0.25 * next, 0.0)
    });
    Ok(shaped.collect())
}

fn quantize(samples: &mut [Complex64]) {
    for s in samples {
        s.re = s.re as f32 as f64;
        s.im = s.im as f32 as f64;
    }
}

/// Impaired frame plus its clean reconstruction. `snr_db = ∞` disables noise.
pub fn emit_frame_pair(profile: &DeviceProfile, payload: &[bool], snr_db: f64, rng: &mut Rng) -> Result<FramePair> {
    emit_frame_pair_len(profile, payload, FRAME_LEN, snr_db, rng)
}

pub fn emit_frame_pair_len(
    profile: &DeviceProfile,
    payload: &[bool],
    len: usize,
    snr_db: f64,
    rng: &mut Rng,
) -> Result<FramePair> {
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("snr_db is NaN".into()));
    }
    let mut clean = clean_burst(payload, len)?;
    let mut impaired = profile.impair(&clean);
    if snr_db.is_finite() {
        let power = clean.iter().map(|s| s.norm_sqr()).sum::<f64>() / len as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
        for s in &mut impaired {
            s.re += sigma * rng.normal();
            s.im += sigma * rng.normal();
        }
    }
    quantize(&mut clean);
    quantize(&mut impaired);
    Ok(FramePair {
        x: SignalFrame {
            samples: impaired,
            device_id: profile.device_id,
            snr_db,
        },
        x_hat: SignalFrame {
            samples: clean,
            device_id: profile.device_id,
            snr_db: f64::INFINITY,
        },
    })
}

/// Random payload, SNR uniform in `snr_range`.
pub fn random_frame_pair(profile: &DeviceProfile, snr_range: (f64, f64), rng: &mut Rng) -> Result<FramePair> {
    let payload = random_payload(FRAME_LEN, rng);
    let snr = rng.uniform_range(snr_range.0, snr_range.1);
    emit_frame_pair(profile, &payload, snr, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskSide {
    Start,
    End,
}

/// Edge-anchored zero gate of `length` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub side: MaskSide,
    pub length: usize,
}

pub fn max_mask_len(len: usize) -> usize {
    len / 6
}

impl MaskSpec {
    pub fn start_n0(&self, len: usize) -> usize {
        match self.side {
            MaskSide::Start => 0,
            MaskSide::End => len - self.length,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let max = max_mask_len(len);
        if self.length > max {
            return Err(Error::MaskTooLong { k: self.length, max });
        }
        Ok(())
    }
}

/// Zero the masked run; every other sample is copied unchanged.
pub fn apply_mask(frame: &SignalFrame, spec: &MaskSpec) -> Result<SignalFrame> {
    let mut out = frame.clone();
    mask_in_place(&mut out.samples, spec)?;
    Ok(out)
}

pub fn mask_in_place(samples: &mut [Complex64], spec: &MaskSpec) -> Result<()> {
    let len = samples.len();
    spec.validate(len)?;
    let n0 = spec.start_n0(len);
    samples[n0..n0 + spec.length]
        .iter_mut()
        .for_each(|s| *s = Complex64::new(0.0, 0.0));
    Ok(())
}

/// Same gate on both halves of the pair, so the reconstruction still
/// describes the masked burst.
pub fn apply_mask_pair(pair: &FramePair, spec: &MaskSpec) -> Result<FramePair> {
    Ok(FramePair {
        x: apply_mask(&pair.x, spec)?,
        x_hat: apply_mask(&pair.x_hat, spec)?,
    })
}

/// Side uniform over {start, end}, length uniform over `0..=len/6`.
pub fn sample_mask_spec(len: usize, rng: &mut Rng) -> Result<MaskSpec> {
    if len < 6 {
        return Err(Error::InvalidArgument(format!("frame length {len} below 6")));
    }
    let side = if rng.bit() { MaskSide::Start } else { MaskSide::End };
    let length = rng.below(max_mask_len(len) + 1);
    Ok(MaskSpec { side, length })
}

pub const RECORD_MAGIC: &[u8; 4] = b"RFFC";
pub const RECORD_VERSION: u16 = 1;
pub const RECORD_HEADER_BYTES: usize = 16;

/// On-disk size of one frame record.
pub fn record_bytes(len: usize) -> usize {
    RECORD_HEADER_BYTES + 2 * len * 4
}

pub fn write_record<W: Write>(w: &mut W, frame: &SignalFrame) -> Result<()> {
    let len = u16::try_from(frame.len())
        .map_err(|_| Error::InvalidArgument(format!("frame length {} exceeds u16", frame.len())))?;
    let mut buf = Vec::with_capacity(record_bytes(frame.len()));
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&frame.device_id.to_le_bytes());
    buf.extend_from_slice(&(frame.snr_db as f32).to_le_bytes());
    for s in &frame.samples {
        buf.extend_from_slice(&(s.re as f32).to_le_bytes());
        buf.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Next record, or `None` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<SignalFrame>> {
    let mut header = [0u8; RECORD_HEADER_BYTES];
    let mut filled = 0;
    while filled < header.len() {
        let n = r.read(&mut header[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Format("truncated record header".into()));
        }
        filled += n;
    }
    if &header[0..4] != RECORD_MAGIC {
        return Err(Error::Format("bad record magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != RECORD_VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let len = u16::from_le_bytes([header[6], header[7]]) as usize;
    let device_id = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let snr_db = f32::from_le_bytes(header[12..16].try_into().unwrap()) as f64;
    let mut body = vec![0u8; 8 * len];
    r.read_exact(&mut body)
        .map_err(|_| Error::Format("truncated record body".into()))?;
    let samples = body
        .chunks_exact(8)
        .map(|c| {
            Complex64::new(
                f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
            )
        })
        .collect();
    Ok(Some(SignalFrame {
        samples,
        device_id,
        snr_db,
    }))
}

/// Plain-text manifest line for a profile.
pub fn manifest_line(p: &DeviceProfile) -> String {
    format!(
        "{} {:e} {:e} {:e} {:e} {:e} {:e}",
        p.device_id,
        p.carrier_offset_ppm,
        p.iq_gain_imbalance_db,
        p.iq_phase_skew_rad,
        p.dc_offset.re,
        p.dc_offset.im,
        p.nonlinearity_coeff
    )
}

pub const MANIFEST_HEADER: &str =
    "# device_id carrier_offset_ppm iq_gain_imbalance_db iq_phase_skew_rad dc_re dc_im nonlinearity_coeff";

pub fn parse_manifest_line(line: &str) -> Result<DeviceProfile> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(Error::Format(format!(
            "manifest line has {} fields: {line}",
            fields.len()
        )));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("manifest field {i}: {e}")))
    };
    Ok(DeviceProfile {
        device_id: fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("manifest device id: {e}")))?,
        carrier_offset_ppm: num(1)?,
        iq_gain_imbalance_db: num(2)?,
        iq_phase_skew_rad: num(3)?,
        dc_offset: Complex64::new(num(4)?, num(5)?),
        nonlinearity_coeff: num(6)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_of(len: usize) -> SignalFrame {
        SignalFrame {
            samples: (0..len)
                .map(|n| Complex64::new(n as f64 + 1.0, -(n as f64) - 0.5))
                .collect(),
            device_id: 1,
            snr_db: 20.0,
        }
    }

    #[test]
    fn population_sizes_and_separation() {
        let mut rng = Rng::new(1, 0);
        let one = generate_population(1, 0, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(generate_population(0, 0, &mut rng).is_err());

        let pool = generate_population(669, 1000, &mut rng).unwrap();
        assert_eq!(pool.len(), 669);
        for i in 0..pool.len() {
            assert_eq!(pool[i].device_id, 1000 + i as u32);
            for j in 0..i {
                assert!(pool[i].separation(&pool[j]) > DEFAULT_MIN_SEPARATION);
            }
        }
        let mut r2 = Rng::new(1, 0);
        let _ = generate_population(1, 0, &mut r2).unwrap();
        let repeat = generate_population(669, 1000, &mut r2).unwrap();
        assert_eq!(repeat, pool);
    }

    #[test]
    fn ideal_profile_without_noise_reproduces_reconstruction() {
        let mut rng = Rng::new(2, 0);
        let payload = random_payload(FRAME_LEN, &mut rng);
        let pair = emit_frame_pair(&DeviceProfile::ideal(0), &payload, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(pair.x.samples, pair.x_hat.samples);
        assert_eq!(pair.x.len(), FRAME_LEN);
    }

    #[test]
    fn different_profiles_give_different_frames() {
        let mut rng = Rng::new(3, 0);
        let pop = generate_population(2, 0, &mut rng).unwrap();
        let payload = random_payload(FRAME_LEN, &mut rng);
        let a = emit_frame_pair(&pop[0], &payload, f64::INFINITY, &mut rng).unwrap();
        let b = emit_frame_pair(&pop[1], &payload, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(a.x_hat.samples, b.x_hat.samples);
        assert_ne!(a.x.samples, b.x.samples);
    }

    #[test]
    fn payload_must_fit() {
        let mut rng = Rng::new(4, 0);
        let p = DeviceProfile::ideal(0);
        assert!(emit_frame_pair(&p, &[true; 3], 20.0, &mut rng).is_err());
    }

    #[test]
    fn mask_examples() {
        let f = frame_of(FRAME_LEN);
        let same = apply_mask(
            &f,
            &MaskSpec {
                side: MaskSide::Start,
                length: 0,
            },
        )
        .unwrap();
        assert_eq!(same, f);

        let m = apply_mask(
            &f,
            &MaskSpec {
                side: MaskSide::Start,
                length: 18,
            },
        )
        .unwrap();
        assert!(m.samples[..18].iter().all(|s| s.re == 0.0 && s.im == 0.0));
        assert_eq!(&m.samples[18..], &f.samples[18..]);

        let m = apply_mask(
            &f,
            &MaskSpec {
                side: MaskSide::End,
                length: 5,
            },
        )
        .unwrap();
        assert!(m.samples[107..].iter().all(|s| s.re == 0.0 && s.im == 0.0));
        assert_eq!(&m.samples[..107], &f.samples[..107]);

        let err = apply_mask(
            &f,
            &MaskSpec {
                side: MaskSide::End,
                length: 19,
            },
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "mask too long: k = 19 exceeds 18");
    }

    #[test]
    fn mask_spec_sampling_hits_both_bounds() {
        let mut rng = Rng::new(5, 0);
        let specs: Vec<MaskSpec> = (0..20_000)
            .map(|_| sample_mask_spec(FRAME_LEN, &mut rng).unwrap())
            .collect();
        assert_eq!(specs.iter().map(|s| s.length).max(), Some(18));
        assert_eq!(specs.iter().map(|s| s.length).min(), Some(0));
        assert!(sample_mask_spec(5, &mut rng).is_err());
    }

    #[test]
    fn record_round_trip_is_exact() {
        let mut rng = Rng::new(6, 0);
        let pop = generate_population(1, 42, &mut rng).unwrap();
        let pair = random_frame_pair(&pop[0], DEFAULT_SNR_DB, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, &pair.x).unwrap();
        write_record(&mut buf, &pair.x_hat).unwrap();
        assert_eq!(buf.len(), 2 * record_bytes(FRAME_LEN));
        assert_eq!(&buf[0..4], b"RFFC");
        let mut cur = std::io::Cursor::new(buf);
        let x = read_record(&mut cur).unwrap().unwrap();
        let x_hat = read_record(&mut cur).unwrap().unwrap();
        assert!(read_record(&mut cur).unwrap().is_none());
        assert_eq!(x.samples, pair.x.samples);
        assert_eq!(x_hat.samples, pair.x_hat.samples);
        assert_eq!(x.device_id, 42);
        assert_eq!(x.snr_db, pair.x.snr_db as f32 as f64);
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = Rng::new(7, 0);
        for p in generate_population(20, 5, &mut rng).unwrap() {
            assert_eq!(parse_manifest_line(&manifest_line(&p)).unwrap(), p);
        }
        assert!(parse_manifest_line("1 2 3").is_err());
    }
}
