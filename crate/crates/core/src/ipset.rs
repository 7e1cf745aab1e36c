//! Sets of IPv4 addresses (and ports) kept as canonical sorted interval lists.
//!
//! Every set is stored as disjoint, non-adjacent, ascending inclusive
//! intervals, so two sets are equal as values exactly when they are equal as
//! predicates. All algebra (union, intersection, complement, difference) and
//! the atomization used by the service-matrix computation live here.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A discrete, bounded, totally ordered element domain.
pub trait Discrete: Copy + Ord + fmt::Debug {
    const MIN: Self;
    const MAX: Self;
    fn succ(self) -> Option<Self>;
    fn pred(self) -> Option<Self>;
}

impl Discrete for u16 {
    const MIN: Self = u16::MIN;
    const MAX: Self = u16::MAX;
    fn succ(self) -> Option<Self> {
        self.checked_add(1)
    }
    fn pred(self) -> Option<Self> {
        self.checked_sub(1)
    }
}

/// An IPv4 address as a 32-bit value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ip32(u32);

impl Ip32 {
    pub const fn new(value: u32) -> Self {
        Ip32(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub const fn from_octets(a: u8, b: u8, c: u8, d: u8) -> Self {
        Ip32(u32::from_be_bytes([a, b, c, d]))
    }
}

impl Discrete for Ip32 {
    const MIN: Self = Ip32(u32::MIN);
    const MAX: Self = Ip32(u32::MAX);
    fn succ(self) -> Option<Self> {
        self.0.checked_add(1).map(Ip32)
    }
    fn pred(self) -> Option<Self> {
        self.0.checked_sub(1).map(Ip32)
    }
}

impl fmt::Display for Ip32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0.to_be_bytes();
        write!(f, "{a}.{b}.{c}.{d}")
    }
}

impl fmt::Debug for Ip32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Ip32 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: &str| Error::IpExpr {
            expr: s.to_string(),
            offset: 0,
            reason: reason.to_string(),
        };
        let mut octets = [0u8; 4];
        let mut parts = s.split('.');
        for octet in &mut octets {
            let part = parts.next().ok_or_else(|| err("expected four octets"))?;
            if part.is_empty() || part.len() > 3 || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err("octet is not a decimal number"));
            }
            *octet = part
                .parse::<u8>()
                .map_err(|_| err("octet out of range 0-255"))?;
        }
        if parts.next().is_some() {
            return Err(err("expected four octets"));
        }
        Ok(Ip32(u32::from_be_bytes(octets)))
    }
}

/// A canonical set of `T` values: sorted, disjoint, non-adjacent inclusive
/// intervals.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntervalSet<T> {
    runs: Vec<(T, T)>,
}

pub type IpIntervalSet = IntervalSet<Ip32>;
pub type PortSet = IntervalSet<u16>;

impl<T: Discrete> IntervalSet<T> {
    pub fn empty() -> Self {
        IntervalSet { runs: Vec::new() }
    }

    pub fn full() -> Self {
        IntervalSet {
            runs: vec![(T::MIN, T::MAX)],
        }
    }

    pub fn singleton(value: T) -> Self {
        IntervalSet {
            runs: vec![(value, value)],
        }
    }

    /// A single inclusive interval. `lo` must not exceed `hi`.
    pub fn interval(lo: T, hi: T) -> Self {
        assert!(lo <= hi, "interval bounds out of order");
        IntervalSet {
            runs: vec![(lo, hi)],
        }
    }

    /// Builds the canonical form of an arbitrary interval list: intervals may
    /// overlap, touch or arrive unsorted.
    pub fn from_intervals(intervals: impl IntoIterator<Item = (T, T)>) -> Self {
        let mut runs: Vec<(T, T)> = intervals.into_iter().filter(|(lo, hi)| lo <= hi).collect();
        runs.sort();
        let mut out: Vec<(T, T)> = Vec::with_capacity(runs.len());
        for (lo, hi) in runs {
            match out.last_mut() {
                Some((_, last_hi)) if last_hi.succ().is_none_or(|next| lo <= next) => {
                    if hi > *last_hi {
                        *last_hi = hi;
                    }
                }
                _ => out.push((lo, hi)),
            }
        }
        IntervalSet { runs: out }
    }

    pub fn intervals(&self) -> &[(T, T)] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.runs == [(T::MIN, T::MAX)]
    }

    /// Lowest member, if any.
    pub fn min(&self) -> Option<T> {
        self.runs.first().map(|&(lo, _)| lo)
    }

    pub fn contains(&self, value: T) -> bool {
        let idx = self.runs.partition_point(|&(_, hi)| hi < value);
        self.runs.get(idx).is_some_and(|&(lo, _)| lo <= value)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_intervals(self.runs.iter().chain(other.runs.iter()).copied())
    }

    pub fn intersect(&self, other: &Self) -> Self {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.runs.len() && j < other.runs.len() {
            let (alo, ahi) = self.runs[i];
            let (blo, bhi) = other.runs[j];
            let lo = alo.max(blo);
            let hi = ahi.min(bhi);
            if lo <= hi {
                out.push((lo, hi));
            }
            if ahi <= bhi {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntervalSet { runs: out }
    }

    pub fn complement(&self) -> Self {
        let mut out = Vec::new();
        let mut next = Some(T::MIN);
        for &(lo, hi) in &self.runs {
            if let Some(start) = next {
                if start < lo {
                    out.push((start, lo.pred().expect("lo > start >= MIN")));
                }
            }
            next = hi.succ();
        }
        if let Some(start) = next {
            out.push((start, T::MAX));
        }
        IntervalSet { runs: out }
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.intersect(&other.complement())
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.difference(other).is_empty()
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.intersect(other).is_empty()
    }
}

impl<T: Discrete + fmt::Display> fmt::Display for IntervalSet<T> {
    /// Renders as braced intervals joined by " ∪ ", singletons as `{a}`,
    /// ranges as `{lo .. hi}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.runs.is_empty() {
            return write!(f, "∅");
        }
        for (i, (lo, hi)) in self.runs.iter().enumerate() {
            if i > 0 {
                write!(f, " ∪ ")?;
            }
            if lo == hi {
                write!(f, "{{{lo}}}")?;
            } else {
                write!(f, "{{{lo} .. {hi}}}")?;
            }
        }
        Ok(())
    }
}

impl<T: Discrete + fmt::Display> fmt::Debug for IntervalSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl IpIntervalSet {
    /// The set covered by `addr/prefix`. Host bits are masked off, the way
    /// iptables treats them.
    pub fn cidr(addr: Ip32, prefix: u8) -> Result<Self> {
        if prefix > 32 {
            return Err(Error::IpExpr {
                expr: format!("{addr}/{prefix}"),
                offset: 0,
                reason: "prefix length exceeds 32".to_string(),
            });
        }
        let mask: u32 = if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        };
        let lo = addr.value() & mask;
        let hi = lo | !mask;
        Ok(IntervalSet::interval(Ip32::new(lo), Ip32::new(hi)))
    }

    /// Decomposes the set into the minimal list of CIDR blocks, ascending.
    pub fn to_cidrs(&self) -> Vec<(Ip32, u8)> {
        let mut out = Vec::new();
        for &(lo, hi) in &self.runs {
            let mut lo = lo.value() as u64;
            let hi = hi.value() as u64;
            while lo <= hi {
                let align = if lo == 0 { 33 } else { lo.trailing_zeros() };
                let span = hi - lo + 1;
                let fit = 63 - span.leading_zeros();
                let bits = align.min(fit);
                out.push((Ip32::new(lo as u32), 32 - bits as u8));
                lo += 1u64 << bits;
            }
        }
        out
    }

    /// CIDR blocks as strings; a /32 renders as the bare address.
    pub fn cidr_strings(&self) -> Vec<String> {
        self.to_cidrs()
            .iter()
            .map(|&(addr, prefix)| {
                if prefix == 32 {
                    addr.to_string()
                } else {
                    format!("{addr}/{prefix}")
                }
            })
            .collect()
    }
}

/// Parses an address set expression: a comma-separated list of plain
/// addresses (`10.0.0.1`), CIDR blocks (`10.0.0.0/8`) and dash ranges
/// (`10.0.0.1-10.0.0.9`).
pub fn parse_ip_expr(expr: &str) -> Result<IpIntervalSet> {
    let err = |offset: usize, reason: String| Error::IpExpr {
        expr: expr.to_string(),
        offset,
        reason,
    };
    if expr.trim().is_empty() {
        return Err(err(0, "empty expression".to_string()));
    }
    let mut set = IpIntervalSet::empty();
    let mut offset = 0;
    for part in expr.split(',') {
        let trimmed = part.trim();
        let part_offset = offset + (part.len() - part.trim_start().len());
        offset += part.len() + 1;
        if trimmed.is_empty() {
            return Err(err(part_offset, "empty list element".to_string()));
        }
        let piece = if let Some((a, b)) = trimmed.split_once('-') {
            let lo: Ip32 = a
                .trim()
                .parse()
                .map_err(|_| err(part_offset, format!("invalid address {:?}", a.trim())))?;
            let hi: Ip32 = b
                .trim()
                .parse()
                .map_err(|_| err(part_offset, format!("invalid address {:?}", b.trim())))?;
            if lo > hi {
                return Err(err(part_offset, format!("range {trimmed:?} is descending")));
            }
            IpIntervalSet::interval(lo, hi)
        } else if let Some((addr, plen)) = trimmed.split_once('/') {
            let addr: Ip32 = addr
                .parse()
                .map_err(|_| err(part_offset, format!("invalid address {addr:?}")))?;
            let plen: u8 = plen
                .parse()
                .map_err(|_| err(part_offset, format!("invalid prefix length {plen:?}")))?;
            IpIntervalSet::cidr(addr, plen)
                .map_err(|_| err(part_offset, format!("invalid prefix length {plen}")))?
        } else {
            let addr: Ip32 = trimmed
                .parse()
                .map_err(|_| err(part_offset, format!("invalid address {trimmed:?}")))?;
            IpIntervalSet::singleton(addr)
        };
        set = set.union(&piece);
    }
    Ok(set)
}

/// Computes the coarsest partition of the full address space such that every
/// input set is a union of partition blocks. Blocks (atoms) may be
/// non-contiguous. Returned in ascending order of their lowest address.
pub fn atomize(sets: &[IpIntervalSet]) -> Vec<IpIntervalSet> {
    use std::collections::BTreeMap;

    const END: u64 = 1 << 32;
    let mut cuts: Vec<u64> = vec![0, END];
    for set in sets {
        for &(lo, hi) in set.intervals() {
            cuts.push(lo.value() as u64);
            cuts.push(hi.value() as u64 + 1);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut groups: BTreeMap<Vec<bool>, Vec<(Ip32, Ip32)>> = BTreeMap::new();
    for window in cuts.windows(2) {
        let lo = Ip32::new(window[0] as u32);
        let hi = Ip32::new((window[1] - 1) as u32);
        let signature: Vec<bool> = sets.iter().map(|s| s.contains(lo)).collect();
        groups.entry(signature).or_default().push((lo, hi));
    }

    let mut atoms: Vec<IpIntervalSet> = groups
        .into_values()
        .map(IpIntervalSet::from_intervals)
        .collect();
    atoms.sort_by_key(|a| a.min());
    atoms
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ip32 {
        s.parse().unwrap()
    }

    fn set(expr: &str) -> IpIntervalSet {
        parse_ip_expr(expr).unwrap()
    }

    #[test]
    fn parses_single_address() {
        assert_eq!(set("10.0.0.1"), IpIntervalSet::singleton(ip("10.0.0.1")));
    }

    #[test]
    fn parses_cidr_and_masks_host_bits() {
        let expected = IpIntervalSet::interval(ip("10.0.0.0"), ip("10.255.255.255"));
        assert_eq!(set("10.0.0.0/8"), expected);
        assert_eq!(set("10.1.2.3/8"), expected);
    }

    #[test]
    fn parses_dash_range_and_comma_list() {
        assert_eq!(
            set("10.0.0.1-10.0.0.9"),
            IpIntervalSet::interval(ip("10.0.0.1"), ip("10.0.0.9"))
        );
        assert_eq!(
            set("10.0.0.1,10.0.0.42"),
            IpIntervalSet::singleton(ip("10.0.0.1")).union(&IpIntervalSet::singleton(ip("10.0.0.42")))
        );
    }

    #[test]
    fn rejects_malformed_expressions() {
        for bad in ["", "10.0.0", "10.0.0.256", "10.0.0.0/33", "10.0.0.9-10.0.0.1", "1.2.3.4,,5.6.7.8"] {
            assert!(parse_ip_expr(bad).is_err(), "accepted {bad:?}");
        }
        match parse_ip_expr("10.0.0.1,10.0.0.300") {
            Err(Error::IpExpr { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("expected position-carrying error, got {other:?}"),
        }
    }

    #[test]
    fn complement_of_cidr() {
        let c = set("10.0.0.0/8").complement();
        assert_eq!(
            c.intervals(),
            &[
                (ip("0.0.0.0"), ip("9.255.255.255")),
                (ip("11.0.0.0"), ip("255.255.255.255")),
            ]
        );
        assert_eq!(c.to_string(), "{0.0.0.0 .. 9.255.255.255} ∪ {11.0.0.0 .. 255.255.255.255}");
    }

    #[test]
    fn union_with_complement_is_full() {
        let s = set("10.0.0.0/8,192.168.0.1");
        assert!(s.union(&s.complement()).is_full());
        assert!(s.intersect(&s.complement()).is_empty());
    }

    #[test]
    fn difference_splits_around_singletons() {
        let inner = set("10.0.0.0/8").difference(&set("10.0.0.1,10.0.0.2,10.0.0.3,10.0.0.4"));
        assert_eq!(inner.to_string(), "{10.0.0.0} ∪ {10.0.0.5 .. 10.255.255.255}");
    }

    #[test]
    fn adjacent_intervals_merge() {
        let s = IpIntervalSet::from_intervals([(ip("10.0.0.1"), ip("10.0.0.3")), (ip("10.0.0.4"), ip("10.0.0.9"))]);
        assert_eq!(s.intervals(), &[(ip("10.0.0.1"), ip("10.0.0.9"))]);
    }

    #[test]
    fn contains_checks_bounds() {
        let s = set("10.0.0.0/8");
        assert!(s.contains(ip("10.0.0.0")));
        assert!(s.contains(ip("10.255.255.255")));
        assert!(!s.contains(ip("9.255.255.255")));
        assert!(!s.contains(ip("11.0.0.0")));
    }

    #[test]
    fn cidr_decomposition_is_minimal() {
        assert_eq!(set("10.0.0.0/8").cidr_strings(), vec!["10.0.0.0/8"]);
        assert_eq!(set("10.0.0.1").cidr_strings(), vec!["10.0.0.1"]);
        assert_eq!(
            IpIntervalSet::interval(ip("10.0.0.1"), ip("10.0.0.4")).cidr_strings(),
            vec!["10.0.0.1", "10.0.0.2/31", "10.0.0.4"]
        );
        assert!(IpIntervalSet::full().cidr_strings() == vec!["0.0.0.0/0"]);
    }

    #[test]
    fn atomize_of_nothing_is_the_full_space() {
        let atoms = atomize(&[]);
        assert_eq!(atoms.len(), 1);
        assert!(atoms[0].is_full());
    }

    #[test]
    fn atomize_of_one_cidr_yields_set_and_complement() {
        let atoms = atomize(&[set("10.0.0.0/8")]);
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[0], set("10.0.0.0/8").complement());
        assert_eq!(atoms[1], set("10.0.0.0/8"));
    }

    #[test]
    fn atoms_partition_and_reconstruct_inputs() {
        let inputs = vec![set("10.0.0.0/8"), set("10.0.0.1,10.0.0.42"), set("9.0.0.0-10.0.0.3")];
        let atoms = atomize(&inputs);
        let mut union = IpIntervalSet::empty();
        for (i, a) in atoms.iter().enumerate() {
            assert!(!a.is_empty());
            union = union.union(a);
            for b in &atoms[i + 1..] {
                assert!(a.is_disjoint(b));
            }
        }
        assert!(union.is_full());
        for input in &inputs {
            let rebuilt = atoms
                .iter()
                .filter(|a| a.is_subset(input))
                .fold(IpIntervalSet::empty(), |acc, a| acc.union(a));
            assert_eq!(&rebuilt, input);
        }
    }

    #[test]
    fn port_sets_share_the_algebra() {
        let s = PortSet::from_intervals([(22, 22), (80, 90)]);
        assert!(s.contains(22));
        assert!(!s.contains(23));
        assert_eq!(s.complement().intervals(), &[(0, 21), (23, 79), (91, u16::MAX)]);
    }
}
