//! Closed-form OFDMA link model: SINR, Shannon rate, success threshold and
//! probability, and the transmission outcome of a single offloaded task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Radio parameters shared by every link in the arena.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams<T> {
    /// D2D transmit power, watts.
    pub pt_m: T,
    /// Cellular transmit power, watts.
    pub pt_e: T,
    /// D2D receive power, watts.
    pub pr_m: T,
    /// Cellular receive power, watts.
    pub pr_e: T,
    /// Bandwidth per receiver, hertz.
    pub bandwidth: T,
    pub n_tot: u32,
    pub path_loss_exp: T,
    /// Noise power, watts.
    pub noise: T,
}

impl<T: Real> Default for LinkParams<T> {
    fn default() -> Self {
        Self {
            pt_m: T::lit(0.1),
            pt_e: T::lit(0.2),
            pr_m: T::lit(0.1),
            pr_e: T::lit(0.2),
            bandwidth: T::lit(1e7),
            n_tot: 64,
            path_loss_exp: T::lit(4.0),
            noise: T::lit(5e-14),
        }
    }
}

impl<T: Real> LinkParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, T); 7] = [
            ("pt_m", self.pt_m),
            ("pt_e", self.pt_e),
            ("pr_m", self.pr_m),
            ("pr_e", self.pr_e),
            ("bandwidth", self.bandwidth),
            ("path_loss_exp", self.path_loss_exp),
            ("noise", self.noise),
        ];
        for (field, v) in positive {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be > 0, got {v:?}")));
            }
        }
        if self.n_tot < 1 {
            return Err(Error::invalid("n_tot", "must be >= 1"));
        }
        Ok(())
    }

    pub fn tx_power(&self, kind: LinkKind) -> T {
        match kind {
            LinkKind::D2d => self.pt_m,
            LinkKind::Cellular => self.pt_e,
        }
    }

    pub fn rx_power(&self, kind: LinkKind) -> T {
        match kind {
            LinkKind::D2d => self.pr_m,
            LinkKind::Cellular => self.pr_e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    D2d,
    Cellular,
}

/// One transmitter-to-receiver link as seen in a single slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkInstance<T> {
    pub transmitter: usize,
    pub receiver: usize,
    pub kind: LinkKind,
    pub distance: T,
    /// Transmitters sharing the receiver's subchannel pool this slot.
    pub n_tra: u32,
    pub n_sub: u32,
}

impl<T: Real> LinkInstance<T> {
    pub fn new(
        transmitter: usize,
        receiver: usize,
        kind: LinkKind,
        distance: T,
        n_tra: u32,
        n_tot: u32,
    ) -> Self {
        Self {
            transmitter,
            receiver,
            kind,
            distance,
            n_tra,
            n_sub: subchannels(n_tot, n_tra),
        }
    }
}

/// Even split of `n_tot` subchannels among `n_tra` co-targeting transmitters, rounded down.
pub fn subchannels(n_tot: u32, n_tra: u32) -> u32 {
    n_tot / n_tra.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransmissionOutcome<T> {
    pub offloaded: bool,
    pub dropped: bool,
    /// Set when the requested link was outside D2D range or had no subchannel.
    pub invalid_target: bool,
    pub t_tra: T,
    pub e_tra: T,
    pub e_rec: T,
}

impl<T: Real> TransmissionOutcome<T> {
    /// Outcome of a task executed on its own device.
    pub fn local() -> Self {
        Self {
            offloaded: false,
            dropped: false,
            invalid_target: false,
            t_tra: T::zero(),
            e_tra: T::zero(),
            e_rec: T::zero(),
        }
    }

    fn dropped(invalid_target: bool) -> Self {
        Self {
            offloaded: true,
            dropped: true,
            invalid_target,
            ..Self::local()
        }
    }
}

/// Signal-to-noise ratio `pt * dist^-alpha / n0`.
pub fn sinr<T: Real>(pt: T, dist: T, alpha: T, n0: T) -> Result<T> {
    if !(dist > T::zero()) {
        return Err(Error::NonPositiveDistance(dist.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(pt * dist.powf(-alpha) / n0)
}

/// Rate in bit/s over `n_sub` of `n_tot` subchannels of a `bandwidth`-hertz pool.
pub fn tx_rate<T: Real>(bandwidth: T, n_sub: u32, n_tot: u32, sinr: T) -> T {
    let share = T::lit(n_sub as f64) / T::lit(n_tot as f64);
    bandwidth * share * sinr.ln_1p() / T::LN_2()
}

/// SNR threshold a `size_bits` payload must clear to be delivered within one slot.
///
/// Returns `+inf` when the exponent exceeds 1024, which drives the success
/// probability to zero.
pub fn success_threshold<T: Real>(size_bits: T, slot: T, bandwidth: T, n_sub: u32, n_tot: u32) -> T {
    let exponent = size_bits * T::lit(n_tot as f64) / (slot * bandwidth * T::lit(n_sub as f64));
    if !(exponent <= T::lit(1024.0)) {
        return T::infinity();
    }
    (exponent * T::LN_2()).exp_m1()
}

/// Delivery probability `exp(-n0 * eps / (pt * dist^-alpha))`.
pub fn success_prob<T: Real>(pt: T, dist: T, alpha: T, n0: T, eps: T) -> T {
    if eps.is_infinite() {
        return T::zero();
    }
    if eps == T::zero() {
        return T::one();
    }
    let received = pt * dist.powf(-alpha);
    (-(n0 * eps) / received).exp()
}

/// Derived quantities of a link before the random success draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget<T> {
    pub sinr: T,
    pub rate: T,
    pub threshold: T,
    pub p_success: T,
}

pub fn link_budget<T: Real>(
    size_bits: T,
    link: &LinkInstance<T>,
    params: &LinkParams<T>,
    slot: T,
) -> Result<LinkBudget<T>> {
    let pt = params.tx_power(link.kind);
    let f = sinr(pt, link.distance, params.path_loss_exp, params.noise)?;
    let rate = tx_rate(params.bandwidth, link.n_sub, params.n_tot, f);
    let threshold = success_threshold(size_bits, slot, params.bandwidth, link.n_sub, params.n_tot);
    let p_success = success_prob(pt, link.distance, params.path_loss_exp, params.noise, threshold);
    Ok(LinkBudget {
        sinr: f,
        rate,
        threshold,
        p_success,
    })
}

/// Resolves one transmission given a uniform draw `u` in `[0, 1)`.
///
/// The task is delivered iff `u < p_success`. Dropped transmissions carry no
/// time or energy.
pub fn transmit_with_draw<T: Real>(
    size_bits: T,
    link: &LinkInstance<T>,
    params: &LinkParams<T>,
    slot: T,
    d2d_range: T,
    u: T,
) -> TransmissionOutcome<T> {
    if link.kind == LinkKind::D2d && link.distance > d2d_range {
        return TransmissionOutcome::dropped(true);
    }
    if link.n_sub == 0 {
        return TransmissionOutcome::dropped(true);
    }
    let budget = match link_budget(size_bits, link, params, slot) {
        Ok(b) => b,
        Err(_) => return TransmissionOutcome::dropped(true),
    };
    if u >= budget.p_success {
        return TransmissionOutcome::dropped(false);
    }
    let t_tra = size_bits / budget.rate;
    TransmissionOutcome {
        offloaded: true,
        dropped: false,
        invalid_target: false,
        t_tra,
        e_tra: params.tx_power(link.kind) * t_tra,
        e_rec: params.rx_power(link.kind) * t_tra,
    }
}

/// [`transmit_with_draw`] with the draw taken from `stream`.
pub fn transmit<T: Real, R: Rng + ?Sized>(
    size_bits: T,
    link: &LinkInstance<T>,
    params: &LinkParams<T>,
    slot: T,
    d2d_range: T,
    stream: &mut R,
) -> TransmissionOutcome<T> {
    let u = T::lit(stream.gen::<f64>());
    transmit_with_draw(size_bits, link, params, slot, d2d_range, u)
}
