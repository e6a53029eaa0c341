//! Core value types shared by the whole pipeline. No I/O, no policy.
//!
//! Everything here is an immutable value, safe to share across threads.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::PipelineError;

/// Money in nano-dollars (1e-9 USD), stored exactly.
///
/// Costs arrive as decimal strings; parsing them into fixed-point integers
/// keeps every sum exact and independent of summation order, which the
/// aggregation layer relies on for partition-invariant output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i128);

pub const NANOS_PER_USD: i128 = 1_000_000_000;

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_nanos(nanos: i128) -> Money {
        Money(nanos)
    }

    pub fn nanos(self) -> i128 {
        self.0
    }

    /// Parse a decimal string like "0.003" exactly. Fractional digits past
    /// the ninth are rounded half-even.
    pub fn parse(s: &str) -> Result<Money, PipelineError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(PipelineError::Money("empty value".into()));
        }
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(PipelineError::Money(format!("malformed money value {s:?}")));
        }
        let bad = |_| PipelineError::Money(format!("malformed money value {s:?}"));
        let int: i128 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(bad)?
        };
        let mut nanos = int
            .checked_mul(NANOS_PER_USD)
            .ok_or_else(|| PipelineError::Money(format!("money overflow in {s:?}")))?;
        if !frac_part.is_empty() {
            if !frac_part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(PipelineError::Money(format!("malformed money value {s:?}")));
            }
            let (keep, rest) = if frac_part.len() > 9 {
                frac_part.split_at(9)
            } else {
                (frac_part, "")
            };
            let mut frac: i128 = keep.parse().map_err(bad)?;
            frac *= 10i128.pow(9 - keep.len() as u32);
            // Round half-even on the truncated tail.
            if !rest.is_empty() {
                let first = rest.as_bytes()[0] - b'0';
                let tail_nonzero = rest.bytes().skip(1).any(|b| b != b'0');
                if first > 5 || (first == 5 && (tail_nonzero || frac % 2 == 1)) {
                    frac += 1;
                }
            }
            nanos += frac;
        }
        Ok(Money(if neg { -nanos } else { nanos }))
    }

    /// Nearest-nano conversion from a float. Rejects NaN and infinities.
    pub fn from_usd(usd: f64) -> Result<Money, PipelineError> {
        if !usd.is_finite() {
            return Err(PipelineError::Money(format!("non-finite money value {usd}")));
        }
        Ok(Money((usd * NANOS_PER_USD as f64).round() as i128))
    }

    pub fn to_usd(self) -> f64 {
        self.0 as f64 / NANOS_PER_USD as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// Exact scaling by a count with division by 1000, used for
    /// `impressions * cpm / 1000` style cost arithmetic.
    pub fn per_mille_times(self, count: u64) -> Money {
        Money(self.0 * count as i128 / 1000)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let neg = self.0 < 0;
        let abs = self.0.unsigned_abs();
        let int = abs / NANOS_PER_USD as u128;
        let frac = abs % NANOS_PER_USD as u128;
        if neg {
            write!(f, "-")?;
        }
        if frac == 0 {
            write!(f, "{int}")
        } else {
            let s = format!("{frac:09}");
            write!(f, "{int}.{}", s.trim_end_matches('0'))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeviceType {
    Desktop,
    Mobile,
    Tablet,
    /// Catch-all for feed drift; unknown device strings never halt a run.
    Other,
}

impl DeviceType {
    pub fn parse(s: &str) -> DeviceType {
        match s {
            "Desktop" | "desktop" => DeviceType::Desktop,
            "Mobile" | "mobile" => DeviceType::Mobile,
            "Tablet" | "tablet" => DeviceType::Tablet,
            _ => DeviceType::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceType::Desktop => "Desktop",
            DeviceType::Mobile => "Mobile",
            DeviceType::Tablet => "Tablet",
            DeviceType::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FoldPosition {
    Below = 0,
    Above = 1,
    /// Live feeds carry unset folds; Unknown is a first-class value.
    Unknown = 2,
}

impl FoldPosition {
    pub fn parse(s: &str) -> FoldPosition {
        match s {
            "1" | "Above" | "above" => FoldPosition::Above,
            "0" | "Below" | "below" => FoldPosition::Below,
            _ => FoldPosition::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FoldPosition::Above => "1",
            FoldPosition::Below => "0",
            FoldPosition::Unknown => "unknown",
        }
    }
}

/// The targeting context key. Strings are kept verbatim from input; matching
/// is exact, never case-folded. There is no user-level identifier field by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FeatureCombination {
    pub site_domain: String,
    pub device_type: String,
    /// "WxH" in pixels, both dimensions > 0.
    pub size: String,
    pub fold_position: String,
    /// Country code and region/DMA joined with '-'.
    pub geo: String,
    pub operating_system: String,
    pub browser: String,
    pub seller_member_id: String,
    pub tag_id: String,
    pub publisher_id: String,
}

impl FeatureCombination {
    /// Validates the size pattern `<digits>x<digits>` with positive dims.
    pub fn validate_size(size: &str) -> Result<(), PipelineError> {
        let valid = size
            .split_once('x')
            .map(|(w, h)| {
                let ok = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
                ok(w) && ok(h) && w.parse::<u64>().unwrap_or(0) > 0 && h.parse::<u64>().unwrap_or(0) > 0
            })
            .unwrap_or(false);
        if valid {
            Ok(())
        } else {
            Err(PipelineError::Data(format!("invalid size {size:?}")))
        }
    }

    pub fn fields(&self) -> [&str; 10] {
        [
            &self.site_domain,
            &self.device_type,
            &self.size,
            &self.fold_position,
            &self.geo,
            &self.operating_system,
            &self.browser,
            &self.seller_member_id,
            &self.tag_id,
            &self.publisher_id,
        ]
    }
}

/// Per-combination aggregate over the grouped event rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureStats {
    pub key: FeatureCombination,
    pub impressions: u64,
    pub clicks: u64,
    pub cost: Money,
}

impl FeatureStats {
    pub fn new(
        key: FeatureCombination,
        impressions: u64,
        clicks: u64,
        cost: Money,
    ) -> Result<FeatureStats, PipelineError> {
        if clicks > impressions {
            return Err(PipelineError::Data(format!(
                "clicks ({clicks}) exceed impressions ({impressions})"
            )));
        }
        if cost.is_negative() {
            return Err(PipelineError::Data("negative cost".into()));
        }
        if impressions == 0 && cost != Money::ZERO {
            return Err(PipelineError::Data("nonzero cost with zero impressions".into()));
        }
        Ok(FeatureStats {
            key,
            impressions,
            clicks,
            cost,
        })
    }
}

/// Pseudo-counts and a prior CPM derived from population averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub prior_clicks: f64,
    pub prior_impressions: f64,
    pub prior_cpm_usd: f64,
}

impl Prior {
    pub fn new(
        prior_clicks: f64,
        prior_impressions: f64,
        prior_cpm_usd: f64,
    ) -> Result<Prior, PipelineError> {
        for (name, v) in [
            ("prior_clicks", prior_clicks),
            ("prior_impressions", prior_impressions),
            ("prior_cpm_usd", prior_cpm_usd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PipelineError::Data(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if prior_clicks > prior_impressions {
            return Err(PipelineError::Data(format!(
                "prior clicks ({prior_clicks}) exceed prior impressions ({prior_impressions})"
            )));
        }
        Ok(Prior {
            prior_clicks,
            prior_impressions,
            prior_cpm_usd,
        })
    }

    /// The no-information prior: adjusted metrics reduce to the raw ones.
    pub fn empty() -> Prior {
        Prior {
            prior_clicks: 0.0,
            prior_impressions: 0.0,
            prior_cpm_usd: 0.0,
        }
    }
}

/// Posterior-mean metrics after folding the prior into a feature's data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustedMetrics {
    pub adjusted_ctr: f64,
    pub adjusted_cost_usd: f64,
    pub adjusted_impressions: f64,
    pub adjusted_cpm_usd: f64,
}

impl AdjustedMetrics {
    pub fn new(
        adjusted_ctr: f64,
        adjusted_cost_usd: f64,
        adjusted_impressions: f64,
        adjusted_cpm_usd: f64,
    ) -> Result<AdjustedMetrics, PipelineError> {
        for (name, v) in [
            ("adjusted_ctr", adjusted_ctr),
            ("adjusted_cost_usd", adjusted_cost_usd),
            ("adjusted_impressions", adjusted_impressions),
            ("adjusted_cpm_usd", adjusted_cpm_usd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PipelineError::Data(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if adjusted_ctr > 1.0 {
            return Err(PipelineError::Data(format!("adjusted_ctr {adjusted_ctr} > 1")));
        }
        if adjusted_impressions <= 0.0 {
            return Err(PipelineError::Data("adjusted_impressions must be > 0".into()));
        }
        Ok(AdjustedMetrics {
            adjusted_ctr,
            adjusted_cost_usd,
            adjusted_impressions,
            adjusted_cpm_usd,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecommendationSource {
    Network,
    Campaign,
}

impl RecommendationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RecommendationSource::Network => "network",
            RecommendationSource::Campaign => "campaign",
        }
    }
}

/// A feature combination paired with the bid we are willing to pay for it.
#[derive(Debug, Clone, PartialEq)]
pub struct BidRecommendation {
    pub key: FeatureCombination,
    pub metrics: AdjustedMetrics,
    pub bid_cpm_usd: f64,
    pub source: RecommendationSource,
    pub campaign_id: String,
    /// Raw impressions observed for this feature, used by scale budgeting.
    pub historical_impressions: u64,
}

/// Format with half-even rounding at `decimals` places; export-time only,
/// internal math is unrounded.
///
/// Rounding happens in decimal: the value is first printed with six guard
/// digits, then rounded digit-wise, so a bid like 1.8815 lands on 1.882
/// rather than whatever its nearest binary neighbour would give.
pub fn format_rounded(value: f64, decimals: usize) -> String {
    let guard = format!("{:.*}", decimals + 6, value);
    let (sign, body) = match guard.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", guard.as_str()),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().take(decimals))
        .map(|b| b - b'0')
        .collect();
    let tail = &frac_part[decimals..];
    let first = tail.as_bytes()[0] - b'0';
    let tail_nonzero = tail.bytes().skip(1).any(|b| b != b'0');
    let last_kept = *digits.last().unwrap_or(&0);
    if first > 5 || (first == 5 && (tail_nonzero || last_kept % 2 == 1)) {
        // Propagate the carry.
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let total = digits.len();
    let int_len = total - decimals;
    let to_str = |ds: &[u8]| ds.iter().map(|d| (d + b'0') as char).collect::<String>();
    let int_str = if int_len == 0 { "0".to_string() } else { to_str(&digits[..int_len]) };
    let result = if decimals == 0 {
        format!("{sign}{int_str}")
    } else {
        format!("{sign}{int_str}.{}", to_str(&digits[int_len..]))
    };
    // Normalize "-0.000" to "0.000".
    if result.trim_start_matches('-').bytes().all(|b| b == b'0' || b == b'.') {
        result.trim_start_matches('-').to_string()
    } else {
        result
    }
}

/// Numeric half-even rounding at `decimals` places.
pub fn round_half_even(value: f64, decimals: usize) -> f64 {
    format_rounded(value, decimals).parse().unwrap()
}
