//! Closed-form power, loss, throughput and caching formulas.
//!
//! Everything here is a pure function of its arguments. Units:
//! distances in meters, rates in Mb/s, power in µW, times in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower (exclusive) and upper (inclusive) bound on the path loss exponent.
pub const LOSS_EXPONENT_RANGE: (f64, f64) = (2.0, 4.0);

/// One directed link. The reverse direction is a separate `LinkSpec` and may
/// differ in every field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub distance_m: f64,
    pub rate_mbps: f64,
    pub loss_exponent: f64,
    /// Multiplicative attenuation on power; 1.0 means no fading.
    pub fading_factor: f64,
}

impl LinkSpec {
    /// Link without fading.
    pub fn new(distance_m: f64, rate_mbps: f64, loss_exponent: f64) -> Self {
        LinkSpec {
            distance_m,
            rate_mbps,
            loss_exponent,
            fading_factor: 1.0,
        }
    }

    pub fn with_fading(mut self, fading_factor: f64) -> Self {
        self.fading_factor = fading_factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m > 0.0 && self.distance_m.is_finite()) {
            return Err(Error::domain(format!(
                "link distance must be positive, got {}",
                self.distance_m
            )));
        }
        if !(self.rate_mbps > 0.0 && self.rate_mbps.is_finite()) {
            return Err(Error::domain(format!(
                "link rate must be positive, got {}",
                self.rate_mbps
            )));
        }
        let (lo, hi) = LOSS_EXPONENT_RANGE;
        if !(self.loss_exponent > lo && self.loss_exponent <= hi) {
            return Err(Error::domain(format!(
                "loss exponent must lie in ({lo}, {hi}], got {}",
                self.loss_exponent
            )));
        }
        if !(self.fading_factor >= 0.0 && self.fading_factor.is_finite()) {
            return Err(Error::domain(format!(
                "fading factor must be non-negative, got {}",
                self.fading_factor
            )));
        }
        Ok(())
    }
}

/// Direction of the exponent in capacity-scaled power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityExponent {
    /// `P · e^(−C·E_ff)`: power falls as free capacity and throughput rise.
    #[default]
    Decay,
    /// `P · e^(+C·E_ff)`: the literal sign.
    Growth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerCalibration {
    /// µW per (Mb/s · m^r).
    pub k_power: f64,
    pub capacity_exponent: CapacityExponent,
}

impl Default for PowerCalibration {
    fn default() -> Self {
        PowerCalibration {
            k_power: 0.2,
            capacity_exponent: CapacityExponent::Decay,
        }
    }
}

impl PowerCalibration {
    pub fn unit() -> Self {
        PowerCalibration {
            k_power: 1.0,
            ..Default::default()
        }
    }
}

/// Block counters and transfer measurements for one measurement window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub transmitted_blocks: u64,
    pub received_blocks: u64,
    pub transfer_size_bits: f64,
    pub transfer_time_s: f64,
    pub bandwidth_bps: f64,
}

impl ThroughputStats {
    pub fn validate(&self) -> Result<()> {
        if self.received_blocks > self.transmitted_blocks {
            return Err(Error::domain(format!(
                "received blocks ({}) exceed transmitted blocks ({})",
                self.received_blocks, self.transmitted_blocks
            )));
        }
        if self.transfer_size_bits < 0.0 || self.transfer_time_s < 0.0 {
            return Err(Error::domain("negative transfer size or time"));
        }
        if self.transfer_size_bits > 0.0 && self.transfer_time_s <= 0.0 {
            return Err(Error::domain(
                "transfer time must be positive when bits were transferred",
            ));
        }
        Ok(())
    }

    /// Received over transmitted blocks.
    pub fn delivery_ratio(&self) -> Result<f64> {
        self.validate()?;
        if self.transmitted_blocks == 0 {
            return Err(Error::domain("no transmitted blocks in window"));
        }
        Ok(self.received_blocks as f64 / self.transmitted_blocks as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachingParams {
    /// Whole-file download time from a single peer.
    pub tau0_s: f64,
    pub chunk_count: u32,
    /// Wireless peers on the path.
    pub peer_count: u32,
}

/// Storage state of a node. `density` is the free fraction of storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityState {
    pub total_bytes: u64,
    pub used_bytes: u64,
    pub density: f64,
}

impl CapacityState {
    pub fn new(total_bytes: u64, used_bytes: u64) -> Result<Self> {
        if total_bytes == 0 {
            return Err(Error::domain("storage capacity must be positive"));
        }
        if used_bytes > total_bytes {
            return Err(Error::domain(format!(
                "used bytes ({used_bytes}) exceed capacity ({total_bytes})"
            )));
        }
        Ok(CapacityState {
            total_bytes,
            used_bytes,
            density: (total_bytes - used_bytes) as f64 / total_bytes as f64,
        })
    }
}

/// Transmission power `k · R · d^r · Φ` in µW.
pub fn transmission_power(link: &LinkSpec, calib: &PowerCalibration) -> Result<f64> {
    link.validate()?;
    if !(calib.k_power > 0.0) {
        return Err(Error::domain("k_power must be positive"));
    }
    Ok(calib.k_power
        * link.rate_mbps
        * link.distance_m.powf(link.loss_exponent)
        * link.fading_factor)
}

/// Total power over a multi-hop path of asymmetric links.
pub fn path_power(links: &[LinkSpec], calib: &PowerCalibration) -> Result<f64> {
    if links.is_empty() {
        return Err(Error::domain("path has no links"));
    }
    links
        .iter()
        .try_fold(0.0, |acc, link| Ok(acc + transmission_power(link, calib)?))
}

/// Returns `((Σd)^r, Σ d^r)`: one long link versus the same span split into hops.
pub fn long_vs_short_gap(distances: &[f64], exponent: f64) -> Result<(f64, f64)> {
    if distances.len() < 2 {
        return Err(Error::domain("need at least two hops"));
    }
    if !(exponent > 1.0) {
        return Err(Error::domain(format!(
            "exponent must exceed 1, got {exponent}"
        )));
    }
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::domain(format!("distance must be positive, got {d}")));
    }
    let lumped = distances.iter().sum::<f64>().powf(exponent);
    let split = distances.iter().map(|d| d.powf(exponent)).sum();
    Ok((lumped, split))
}

/// `1 − received/transmitted`.
pub fn packet_loss(stats: &ThroughputStats) -> Result<f64> {
    Ok(1.0 - stats.delivery_ratio()?)
}

/// Effective throughput before clamping to `[0, 1]`.
pub fn effective_throughput_unclamped(stats: &ThroughputStats) -> Result<f64> {
    let loss = packet_loss(stats)?;
    if !(stats.transfer_time_s > 0.0) {
        return Err(Error::domain("transfer time must be positive"));
    }
    if !(stats.bandwidth_bps > 0.0) {
        return Err(Error::domain("bandwidth must be positive"));
    }
    Ok((1.0 - loss) * (stats.transfer_size_bits / stats.transfer_time_s) / stats.bandwidth_bps)
}

/// `(1 − loss) · (size / time) / bandwidth`, clamped to `[0, 1]`.
pub fn effective_throughput(stats: &ThroughputStats) -> Result<f64> {
    Ok(effective_throughput_unclamped(stats)?.clamp(0.0, 1.0))
}

/// Scales a power figure by `e^(∓ density · eff)`.
pub fn capacity_scaled_power(
    base_power_uw: f64,
    cap: &CapacityState,
    eff: f64,
    calib: &PowerCalibration,
) -> Result<f64> {
    if !(base_power_uw >= 0.0) {
        return Err(Error::domain("base power must be non-negative"));
    }
    if !(0.0..=1.0).contains(&eff) {
        return Err(Error::domain(format!("E_ff must lie in [0, 1], got {eff}")));
    }
    if !(0.0..=1.0).contains(&cap.density) {
        return Err(Error::domain("capacity density must lie in [0, 1]"));
    }
    let exponent = cap.density * eff;
    let factor = match calib.capacity_exponent {
        CapacityExponent::Decay => (-exponent).exp(),
        CapacityExponent::Growth => exponent.exp(),
    };
    Ok(base_power_uw * factor)
}

/// Per-chunk download delay `(τ₀/m) · log₂ i`, floored at `τ₀/m` for a single peer.
pub fn chunk_delay(params: &CachingParams) -> Result<f64> {
    if !(params.tau0_s > 0.0) {
        return Err(Error::domain("tau0 must be positive"));
    }
    if params.chunk_count == 0 {
        return Err(Error::domain("chunk count must be at least 1"));
    }
    let per_chunk = params.tau0_s / f64::from(params.chunk_count);
    match params.peer_count {
        0 => Err(Error::domain("peer count must be at least 1")),
        1 => Ok(per_chunk),
        i => Ok(per_chunk * f64::from(i).log2()),
    }
}

/// Caching threshold `σ = Σ R_i·d_i / δ̄`.
pub fn caching_threshold(links: &[LinkSpec], delay_s: f64) -> Result<f64> {
    if links.is_empty() {
        return Err(Error::domain("path has no links"));
    }
    if !(delay_s > 0.0) {
        return Err(Error::domain(format!(
            "caching delay must be positive, got {delay_s}"
        )));
    }
    Ok(rate_distance_sum(links) / delay_s)
}

/// `Σ R_i · d_i` (no loss exponent).
pub fn rate_distance_sum(links: &[LinkSpec]) -> f64 {
    links.iter().map(|l| l.rate_mbps * l.distance_m).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(d: f64, rate: f64, r: f64) -> LinkSpec {
        LinkSpec::new(d, rate, r)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn transmission_power_examples() {
        let unit = PowerCalibration::unit();
        assert_eq!(transmission_power(&link(1.0, 2.0, 3.0), &unit).unwrap(), 2.0);
        assert_eq!(transmission_power(&link(2.0, 1.0, 2.5), &unit).unwrap(), 2f64.powf(2.5));
        let calib = PowerCalibration::default();
        let p = transmission_power(&link(9.0, 11.0, 3.0), &calib).unwrap();
        assert!(rel_close(p, 1603.8, 1e-12), "{p}");
    }

    #[test]
    fn transmission_power_at_r_two_is_rejected() {
        // r = 2 sits on the excluded lower bound.
        assert!(transmission_power(&link(2.0, 1.0, 2.0), &PowerCalibration::unit()).is_err());
    }

    #[test]
    fn transmission_power_rejects_bad_links() {
        let unit = PowerCalibration::unit();
        assert!(transmission_power(&link(0.0, 1.0, 3.0), &unit).is_err());
        assert!(transmission_power(&link(1.0, -1.0, 3.0), &unit).is_err());
        assert!(transmission_power(&link(1.0, 1.0, 4.5), &unit).is_err());
        assert!(transmission_power(&link(1.0, 1.0, 4.0), &unit).is_ok());
    }

    #[test]
    fn path_power_examples() {
        let unit = PowerCalibration::unit();
        assert_eq!(path_power(&[link(1.0, 1.0, 3.0)], &unit).unwrap(), 1.0);
        let links = [link(1.0, 2.0, 3.0), link(2.0, 1.0, 3.0)];
        assert_eq!(path_power(&links, &unit).unwrap(), 10.0);
        let rev = [links[1], links[0]];
        assert_eq!(path_power(&rev, &unit).unwrap(), 10.0);
        assert!(path_power(&[], &unit).is_err());
    }

    #[test]
    fn long_vs_short_examples() {
        assert_eq!(long_vs_short_gap(&[1.0, 1.0], 2.0).unwrap(), (4.0, 2.0));
        assert_eq!(long_vs_short_gap(&[1.0, 2.0, 3.0], 2.0).unwrap(), (36.0, 14.0));
        assert!(long_vs_short_gap(&[5.0], 3.0).is_err());
        assert!(long_vs_short_gap(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn packet_loss_examples() {
        let stats = |rx, tx| ThroughputStats {
            transmitted_blocks: tx,
            received_blocks: rx,
            ..Default::default()
        };
        assert_eq!(packet_loss(&stats(10, 10)).unwrap(), 0.0);
        assert_eq!(packet_loss(&stats(0, 10)).unwrap(), 1.0);
        assert!(rel_close(packet_loss(&stats(9, 10)).unwrap(), 0.1, 1e-15));
        assert!(packet_loss(&stats(0, 0)).is_err());
        assert!(packet_loss(&stats(11, 10)).is_err());
    }

    #[test]
    fn effective_throughput_examples() {
        let lost = ThroughputStats {
            transmitted_blocks: 5,
            received_blocks: 0,
            transfer_size_bits: 1e6,
            transfer_time_s: 1.0,
            bandwidth_bps: 1e6,
        };
        assert_eq!(effective_throughput(&lost).unwrap(), 0.0);

        let perfect = ThroughputStats {
            transmitted_blocks: 5,
            received_blocks: 5,
            transfer_size_bits: 2e6,
            transfer_time_s: 2.0,
            bandwidth_bps: 1e6,
        };
        assert_eq!(effective_throughput(&perfect).unwrap(), 1.0);

        let partial = ThroughputStats {
            transmitted_blocks: 10,
            received_blocks: 9,
            transfer_size_bits: 0.5e6,
            transfer_time_s: 1.0,
            bandwidth_bps: 1e6,
        };
        assert!(rel_close(effective_throughput(&partial).unwrap(), 0.45, 1e-12));

        let over = ThroughputStats {
            bandwidth_bps: 0.5e6,
            ..perfect
        };
        assert_eq!(effective_throughput_unclamped(&over).unwrap(), 2.0);
        assert_eq!(effective_throughput(&over).unwrap(), 1.0);

        let no_time = ThroughputStats {
            transfer_time_s: 0.0,
            ..perfect
        };
        assert!(effective_throughput(&no_time).is_err());
    }

    #[test]
    fn capacity_scaled_power_examples() {
        let calib = PowerCalibration::default();
        let full = CapacityState::new(100, 100).unwrap();
        assert_eq!(full.density, 0.0);
        assert_eq!(capacity_scaled_power(42.0, &full, 0.7, &calib).unwrap(), 42.0);
        let empty = CapacityState::new(100, 0).unwrap();
        assert_eq!(capacity_scaled_power(42.0, &empty, 0.0, &calib).unwrap(), 42.0);
        let p = capacity_scaled_power(100.0, &empty, 1.0, &calib).unwrap();
        assert!(rel_close(p, 36.787_944_117_144_23, 1e-12), "{p}");

        let growth = PowerCalibration {
            capacity_exponent: CapacityExponent::Growth,
            ..calib
        };
        let p = capacity_scaled_power(100.0, &empty, 1.0, &growth).unwrap();
        assert!(rel_close(p, 271.828_182_845_904_5, 1e-12), "{p}");

        assert!(capacity_scaled_power(1.0, &empty, 1.5, &calib).is_err());
        assert!(CapacityState::new(10, 11).is_err());
    }

    #[test]
    fn chunk_delay_examples() {
        let p = |tau0_s, chunk_count, peer_count| CachingParams {
            tau0_s,
            chunk_count,
            peer_count,
        };
        assert_eq!(chunk_delay(&p(10.0, 5, 2)).unwrap(), 2.0);
        assert_eq!(chunk_delay(&p(8.0, 2, 4)).unwrap(), 8.0);
        assert_eq!(chunk_delay(&p(10.0, 5, 1)).unwrap(), 2.0);
        assert!(chunk_delay(&p(10.0, 5, 0)).is_err());
        assert!(chunk_delay(&p(10.0, 0, 2)).is_err());
    }

    #[test]
    fn caching_threshold_examples() {
        assert_eq!(caching_threshold(&[link(1.0, 1.0, 3.0)], 1.0).unwrap(), 1.0);
        let links = [link(2.0, 3.0, 3.0), link(1.0, 4.0, 3.0)];
        assert_eq!(caching_threshold(&links, 5.0).unwrap(), 2.0);
        assert_eq!(caching_threshold(&links, 10.0).unwrap(), 1.0);
        assert!(caching_threshold(&links, 0.0).is_err());
        assert!(caching_threshold(&[], 1.0).is_err());
    }

    fn arb_link() -> impl Strategy<Value = LinkSpec> {
        (0.1f64..100.0, 0.1f64..54.0, 2.01f64..=4.0, 1.0f64..3.0)
            .prop_map(|(d, rate, r, phi)| LinkSpec::new(d, rate, r).with_fading(phi))
    }

    proptest! {
        #[test]
        fn power_monotone_in_each_field(l in arb_link(), bump in 1.001f64..2.0) {
            let calib = PowerCalibration::default();
            let base = transmission_power(&l, &calib).unwrap();
            let more_rate = LinkSpec { rate_mbps: l.rate_mbps * bump, ..l };
            let more_dist = LinkSpec { distance_m: l.distance_m * bump, ..l };
            let more_fade = LinkSpec { fading_factor: l.fading_factor * bump, ..l };
            prop_assert!(transmission_power(&more_rate, &calib).unwrap() > base);
            prop_assert!(transmission_power(&more_dist, &calib).unwrap() > base);
            prop_assert!(transmission_power(&more_fade, &calib).unwrap() > base);
            if l.distance_m > 1.0 && l.loss_exponent < 3.99 {
                let more_r = LinkSpec { loss_exponent: (l.loss_exponent + 0.01).min(4.0), ..l };
                prop_assert!(transmission_power(&more_r, &calib).unwrap() > base);
            }
        }

        #[test]
        fn decay_never_exceeds_base(base in 0.0f64..1e4, used in 0u64..=1000, eff in 0.0f64..=1.0) {
            let cap = CapacityState::new(1000, used).unwrap();
            let scaled = capacity_scaled_power(base, &cap, eff, &PowerCalibration::default()).unwrap();
            prop_assert!(scaled <= base);
            if cap.density * eff > 0.0 && base > 0.0 {
                prop_assert!(scaled < base);
            } else {
                prop_assert_eq!(scaled, base);
            }
        }

        #[test]
        fn chunk_delay_monotonicity(tau0 in 0.01f64..100.0, m in 1u32..64, i in 2u32..64) {
            let d = |m, i| chunk_delay(&CachingParams { tau0_s: tau0, chunk_count: m, peer_count: i }).unwrap();
            prop_assert!(d(m + 1, i) <= d(m, i));
            prop_assert!(d(m, i + 1) >= d(m, i));
        }

        #[test]
        fn loss_and_throughput_stay_in_unit_interval(
            tx in 1u64..10_000, frac in 0.0f64..=1.0,
            size in 0.0f64..1e9, time in 1e-3f64..1e3, bw in 1.0f64..1e9,
        ) {
            let rx = ((tx as f64) * frac).floor() as u64;
            let stats = ThroughputStats {
                transmitted_blocks: tx, received_blocks: rx,
                transfer_size_bits: size, transfer_time_s: time, bandwidth_bps: bw,
            };
            let loss = packet_loss(&stats).unwrap();
            prop_assert!((0.0..=1.0).contains(&loss));
            let eff = effective_throughput(&stats).unwrap();
            prop_assert!((0.0..=1.0).contains(&eff));
        }
    }
}
