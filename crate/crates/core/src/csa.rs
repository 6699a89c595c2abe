//! BLE data-channel selection: CSA#1, CSA#2 and the shared remapping step.
//!
//! Everything here is a pure function of its inputs. 16-bit stages are
//! computed in `u32` and reduced modulo 2^16.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of BLE data channels (0..=36).
pub const DATA_CHANNELS: u8 = 37;

/// Period of the 16-bit connection event counter.
pub const COUNTER_PERIOD: u32 = 1 << 16;

/// Connection interval granularity in nanoseconds (1.25 ms).
pub const SLOT_NS: i64 = 1_250_000;

const ALL_CHANNELS_MASK: u64 = (1 << DATA_CHANNELS) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("channel {0} is not a data channel (0..=36)")]
    ChannelOutOfRange(u32),
    #[error("hop increment {0} outside 5..=16")]
    HopIncrement(u8),
    #[error("channel map {mask:#X} has {n_ch} channels, need at least 2")]
    TooFewChannels { mask: u64, n_ch: u32 },
    #[error("channel map {0:#X} sets bits above channel 36")]
    MapBitsAbove36(u64),
    #[error("connection interval {0} us is not a multiple of 1250 us in [7500 us, 4 s]")]
    Interval(u64),
    #[error("malformed hex value {0:?}")]
    Hex(String),
}

/// Set of data channels a connection may hop on, with the ascending list
/// used for remapping.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMap {
    mask: u64,
    ordered: [u8; DATA_CHANNELS as usize],
    n_ch: u8,
}

impl ChannelMap {
    pub fn from_mask(mask: u64) -> Result<Self, ParamError> {
        if mask & !ALL_CHANNELS_MASK != 0 {
            return Err(ParamError::MapBitsAbove36(mask));
        }
        let n_ch = mask.count_ones();
        if n_ch < 2 {
            return Err(ParamError::TooFewChannels { mask, n_ch });
        }
        let mut ordered = [0u8; DATA_CHANNELS as usize];
        let mut n = 0usize;
        for ch in 0..DATA_CHANNELS {
            if mask & (1 << ch) != 0 {
                ordered[n] = ch;
                n += 1;
            }
        }
        Ok(ChannelMap {
            mask,
            ordered,
            n_ch: n as u8,
        })
    }

    pub fn from_channels<I: IntoIterator<Item = u8>>(channels: I) -> Result<Self, ParamError> {
        let mut mask = 0u64;
        for ch in channels {
            check_channel(ch)?;
            mask |= 1 << ch;
        }
        Self::from_mask(mask)
    }

    /// All 37 data channels.
    pub fn all() -> Self {
        Self::from_mask(ALL_CHANNELS_MASK).expect("full map is valid")
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn n_ch(&self) -> u8 {
        self.n_ch
    }

    /// Allowed channels in ascending order.
    pub fn ordered_list(&self) -> &[u8] {
        &self.ordered[..self.n_ch as usize]
    }

    pub fn contains(&self, channel: u8) -> bool {
        channel < DATA_CHANNELS && self.mask & (1 << channel) != 0
    }

    /// Position of `channel` in the ordered list, if allowed.
    pub fn index_of(&self, channel: u8) -> Option<usize> {
        self.ordered_list().binary_search(&channel).ok()
    }

    /// Channels 0..=36 not in the map.
    pub fn excluded(&self) -> impl Iterator<Item = u8> + '_ {
        (0..DATA_CHANNELS).filter(move |&ch| !self.contains(ch))
    }

    /// Hex form with bit i set when channel i is allowed, e.g. `0x1FFFFFFC00`.
    pub fn to_hex(&self) -> String {
        format!("0x{:010X}", self.mask)
    }
}

impl fmt::Debug for ChannelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelMap({}, n_ch={})", self.to_hex(), self.n_ch)
    }
}

impl fmt::Display for ChannelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ChannelMap {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_mask(parse_hex_u64(s)?)
    }
}

impl Serialize for ChannelMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ChannelMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub(crate) fn parse_hex_u64(s: &str) -> Result<u64, ParamError> {
    let t = s.trim();
    let digits = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .unwrap_or(t);
    if digits.is_empty() {
        return Err(ParamError::Hex(s.to_owned()));
    }
    u64::from_str_radix(digits, 16).map_err(|_| ParamError::Hex(s.to_owned()))
}

fn check_channel(ch: u8) -> Result<u8, ParamError> {
    if ch < DATA_CHANNELS {
        Ok(ch)
    } else {
        Err(ParamError::ChannelOutOfRange(ch as u32))
    }
}

/// 32-bit access address carried at the start of every packet.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccessAddress(pub u32);

impl AccessAddress {
    pub fn channel_identifier(self) -> ChannelIdentifier {
        channel_identifier(self)
    }
}

impl fmt::Debug for AccessAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccessAddress({self})")
    }
}

impl fmt::Display for AccessAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:08X}", self.0)
    }
}

impl FromStr for AccessAddress {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = parse_hex_u64(s)?;
        u32::try_from(v)
            .map(AccessAddress)
            .map_err(|_| ParamError::Hex(s.to_owned()))
    }
}

impl Serialize for AccessAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AccessAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// CSA#2 seed derived from the access address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelIdentifier(pub u16);

/// 16-bit connection event counter, wrapping at 65536.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventCounter(pub u16);

impl EventCounter {
    pub fn wrapping_add(self, events: u64) -> Self {
        EventCounter(((self.0 as u64 + events) % COUNTER_PERIOD as u64) as u16)
    }

    /// Counter value of an epoch-extended event index.
    pub fn from_extended(index: u64) -> Self {
        EventCounter((index % COUNTER_PERIOD as u64) as u16)
    }
}

/// Connection interval stored as a count of 1.25 ms slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnInterval(u16);

impl ConnInterval {
    pub const MIN_SLOTS: u16 = 6;
    pub const MAX_SLOTS: u16 = 3200;

    pub fn from_slots(slots: u32) -> Result<Self, ParamError> {
        if (Self::MIN_SLOTS as u32..=Self::MAX_SLOTS as u32).contains(&slots) {
            Ok(ConnInterval(slots as u16))
        } else {
            Err(ParamError::Interval(slots as u64 * 1250))
        }
    }

    pub fn from_micros(us: u64) -> Result<Self, ParamError> {
        if !us.is_multiple_of(1250) || us / 1250 > u32::MAX as u64 {
            return Err(ParamError::Interval(us));
        }
        Self::from_slots((us / 1250) as u32).map_err(|_| ParamError::Interval(us))
    }

    pub fn slots(self) -> u16 {
        self.0
    }

    pub fn as_micros(self) -> u64 {
        self.0 as u64 * 1250
    }

    pub fn as_nanos(self) -> i64 {
        self.0 as i64 * SLOT_NS
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1.25
    }
}

impl Serialize for ConnInterval {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u64(self.as_micros())
    }
}

impl<'de> Deserialize<'de> for ConnInterval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let us = u64::deserialize(deserializer)?;
        ConnInterval::from_micros(us).map_err(serde::de::Error::custom)
    }
}

/// Which channel selection algorithm a connection uses, with its
/// algorithm-specific state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "csa", rename_all = "UPPERCASE")]
pub enum Hopping {
    /// `initial_channel` is the unmapped channel preceding event 0.
    Csa1 {
        hop_increment: u8,
        initial_channel: u8,
    },
    Csa2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionParams {
    pub access_address: AccessAddress,
    #[serde(rename = "c_int_us")]
    pub interval: ConnInterval,
    pub channel_map: ChannelMap,
    #[serde(flatten)]
    pub hopping: Hopping,
}

impl ConnectionParams {
    pub fn csa1(
        access_address: AccessAddress,
        interval: ConnInterval,
        channel_map: ChannelMap,
        hop_increment: u8,
        initial_channel: u8,
    ) -> Result<Self, ParamError> {
        let p = ConnectionParams {
            access_address,
            interval,
            channel_map,
            hopping: Hopping::Csa1 {
                hop_increment,
                initial_channel,
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn csa2(
        access_address: AccessAddress,
        interval: ConnInterval,
        channel_map: ChannelMap,
    ) -> Self {
        ConnectionParams {
            access_address,
            interval,
            channel_map,
            hopping: Hopping::Csa2,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if let Hopping::Csa1 {
            hop_increment,
            initial_channel,
        } = self.hopping
        {
            check_hop_increment(hop_increment)?;
            check_channel(initial_channel)?;
        }
        Ok(())
    }

    pub fn channel_identifier(&self) -> ChannelIdentifier {
        channel_identifier(self.access_address)
    }

    pub fn is_csa2(&self) -> bool {
        matches!(self.hopping, Hopping::Csa2)
    }

    /// Unmapped and mapped channel at an epoch-extended event index.
    ///
    /// CSA#1 keeps recursing across counter wraps, so it needs the extended
    /// index; CSA#2 only sees the index modulo 65536.
    pub fn hop_at(&self, index: u64) -> Hop {
        match self.hopping {
            Hopping::Csa1 {
                hop_increment,
                initial_channel,
            } => {
                let steps = (index % DATA_CHANNELS as u64) + 1;
                let unmapped = ((initial_channel as u64 + steps * hop_increment as u64)
                    % DATA_CHANNELS as u64) as u8;
                Hop {
                    unmapped,
                    channel: remap_csa1(unmapped, &self.channel_map),
                }
            }
            Hopping::Csa2 => {
                let ci = self.channel_identifier();
                let prn = prn_e(EventCounter::from_extended(index), ci);
                let unmapped = (prn % DATA_CHANNELS as u16) as u8;
                Hop {
                    unmapped,
                    channel: remap_with_prn(unmapped, prn, &self.channel_map),
                }
            }
        }
    }
}

/// One hop: the algorithm's raw output and the channel actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub unmapped: u8,
    pub channel: u8,
}

impl Hop {
    pub fn remapped(&self) -> bool {
        self.unmapped != self.channel
    }
}

fn check_hop_increment(h: u8) -> Result<u8, ParamError> {
    if (5..=16).contains(&h) {
        Ok(h)
    } else {
        Err(ParamError::HopIncrement(h))
    }
}

/// CSA#1 recursion step: `(prev + hop_increment) mod 37`.
pub fn csa1_unmapped_channel(prev_channel: u8, hop_increment: u8) -> Result<u8, ParamError> {
    check_channel(prev_channel)?;
    check_hop_increment(hop_increment)?;
    Ok((prev_channel + hop_increment) % DATA_CHANNELS)
}

/// CSA#1 remapping: allowed channels pass through, others go to
/// `ordered_list[unmapped mod n_ch]`.
pub fn remap_csa1(unmapped: u8, map: &ChannelMap) -> u8 {
    if map.contains(unmapped) {
        unmapped
    } else {
        map.ordered_list()[(unmapped % map.n_ch()) as usize]
    }
}

pub fn channel_identifier(aa: AccessAddress) -> ChannelIdentifier {
    ChannelIdentifier(((aa.0 >> 16) as u16) ^ (aa.0 as u16))
}

/// Reverses the bit order inside each byte of a 16-bit word.
pub fn perm16(x: u16) -> u16 {
    let [hi, lo] = x.to_be_bytes();
    u16::from_be_bytes([hi.reverse_bits(), lo.reverse_bits()])
}

/// Multiply-add-modulo stage: `(17 x + ci) mod 2^16`.
pub fn mam(x: u16, ci: ChannelIdentifier) -> u16 {
    ((17 * x as u32 + ci.0 as u32) % COUNTER_PERIOD) as u16
}

/// CSA#2 pseudo-random number for event `k`.
pub fn prn_e(k: EventCounter, ci: ChannelIdentifier) -> u16 {
    let mut x = k.0 ^ ci.0;
    for _ in 0..3 {
        x = mam(perm16(x), ci);
    }
    x ^ ci.0
}

pub fn csa2_unmapped_channel(k: EventCounter, ci: ChannelIdentifier) -> u8 {
    (prn_e(k, ci) % DATA_CHANNELS as u16) as u8
}

/// Mapped CSA#2 channel for event `k`.
pub fn remap_csa2(k: EventCounter, ci: ChannelIdentifier, map: &ChannelMap) -> u8 {
    let prn = prn_e(k, ci);
    remap_with_prn((prn % DATA_CHANNELS as u16) as u8, prn, map)
}

/// CSA#2 remapping index `floor(n_ch * prn_e / 2^16)`.
pub fn csa2_remap_index(prn: u16, n_ch: u8) -> usize {
    ((n_ch as u32 * prn as u32) >> 16) as usize
}

fn remap_with_prn(unmapped: u8, prn: u16, map: &ChannelMap) -> u8 {
    if map.contains(unmapped) {
        unmapped
    } else {
        map.ordered_list()[csa2_remap_index(prn, map.n_ch())]
    }
}

/// Channel used at event `k`. For CSA#1, `k` counts events since the seed.
pub fn channel_for_event(params: &ConnectionParams, k: EventCounter) -> u8 {
    params.hop_at(k.0 as u64).channel
}
