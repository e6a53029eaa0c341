//! Feed parsing: impression/click CSV streams into event rows, derived
//! columns, and the network/campaign split.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime, Utc};

use crate::domain::{DeviceType, FeatureCombination, FoldPosition, Money};
use crate::error::PipelineError;

/// Logical fields of the feed, mapped to physical column names by a schema.
pub const LOGICAL_FIELDS: [&str; 18] = [
    "timestamp",
    "height",
    "width",
    "device_type",
    "operating_system",
    "browser",
    "fold_position",
    "geo_country",
    "geo_region",
    "seller_member_id",
    "tag_id",
    "publisher_id",
    "site_domain",
    "insertion_order_id",
    "advertiser_id",
    "is_click",
    "media_cost_usd",
    "data_cost_usd",
];

/// Maps logical field names to the header names of a concrete feed.
#[derive(Debug, Clone)]
pub struct FeedSchema {
    columns: HashMap<String, String>,
}

impl Default for FeedSchema {
    fn default() -> Self {
        FeedSchema {
            columns: LOGICAL_FIELDS
                .iter()
                .map(|f| (f.to_string(), f.to_string()))
                .collect(),
        }
    }
}

impl FeedSchema {
    /// Override the physical column name for a logical field.
    pub fn rename(&mut self, logical: &str, physical: &str) -> Result<(), PipelineError> {
        if !LOGICAL_FIELDS.contains(&logical) {
            return Err(PipelineError::Config(format!("unknown schema field {logical:?}")));
        }
        self.columns.insert(logical.to_string(), physical.to_string());
        Ok(())
    }

    fn column(&self, logical: &str) -> &str {
        &self.columns[logical]
    }
}

/// One event row from the impression or click stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEventRow {
    pub timestamp: DateTime<Utc>,
    pub height: u32,
    pub width: u32,
    pub device_type: DeviceType,
    pub operating_system: String,
    pub browser: String,
    pub fold_position: FoldPosition,
    pub geo_country: String,
    pub geo_region: String,
    pub seller_member_id: String,
    pub tag_id: String,
    pub publisher_id: String,
    pub site_domain: String,
    pub insertion_order_id: String,
    pub advertiser_id: String,
    pub is_click: u8,
    pub media_cost_usd: Money,
    pub data_cost_usd: Money,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    MissingField,
    InvalidIsClick,
    InvalidCost,
    InvalidTimestamp,
    InvalidSize,
    OutOfWindow,
    GeoFiltered,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MissingField => "missing_field",
            RejectReason::InvalidIsClick => "invalid_is_click",
            RejectReason::InvalidCost => "invalid_cost",
            RejectReason::InvalidTimestamp => "invalid_timestamp",
            RejectReason::InvalidSize => "invalid_size",
            RejectReason::OutOfWindow => "out_of_window",
            RejectReason::GeoFiltered => "geo_filtered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectRecord {
    /// 1-based data row number, header excluded.
    pub row_number: u64,
    pub reason: RejectReason,
}

/// Ingest-time filters: time window and geo allowlist.
#[derive(Debug, Clone, Default)]
pub struct IngestFilter {
    pub window_start: Option<DateTime<Utc>>,
    pub window_end: Option<DateTime<Utc>>,
    /// Country-code allowlist; empty means no geo filtering.
    pub geo_allowlist: Vec<String>,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub rows: Vec<RawEventRow>,
    pub rejects: Vec<RejectRecord>,
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .ok()
        .map(|n| n.and_utc())
}

/// Parse a delimited feed. Every input row yields exactly one row or one
/// reject; a malformed row never aborts the run. A missing mandatory column
/// in the header is fatal.
pub fn parse_feed(
    input: impl Read,
    schema: &FeedSchema,
    filter: &IngestFilter,
) -> Result<ParseOutcome, PipelineError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for logical in LOGICAL_FIELDS {
        let physical = schema.column(logical);
        let pos = header
            .iter()
            .position(|h| h == physical)
            .ok_or_else(|| PipelineError::MissingColumn(physical.to_string()))?;
        index.insert(logical, pos);
    }

    let mut out = ParseOutcome::default();
    for (i, record) in reader.into_records().enumerate() {
        let row_number = i as u64 + 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                out.rejects.push(RejectRecord {
                    row_number,
                    reason: RejectReason::MissingField,
                });
                continue;
            }
        };
        match parse_row(&record, &index, filter) {
            Ok(row) => out.rows.push(row),
            Err(reason) => out.rejects.push(RejectRecord { row_number, reason }),
        }
    }
    Ok(out)
}

fn parse_row(
    record: &csv::StringRecord,
    index: &HashMap<&str, usize>,
    filter: &IngestFilter,
) -> Result<RawEventRow, RejectReason> {
    let field = |name: &str| -> Result<&str, RejectReason> {
        record.get(index[name]).ok_or(RejectReason::MissingField)
    };

    let timestamp = parse_timestamp(field("timestamp")?).ok_or(RejectReason::InvalidTimestamp)?;
    if let Some(start) = filter.window_start {
        if timestamp < start {
            return Err(RejectReason::OutOfWindow);
        }
    }
    if let Some(end) = filter.window_end {
        if timestamp >= end {
            return Err(RejectReason::OutOfWindow);
        }
    }

    let height: u32 = field("height")?.trim().parse().map_err(|_| RejectReason::InvalidSize)?;
    let width: u32 = field("width")?.trim().parse().map_err(|_| RejectReason::InvalidSize)?;
    if height == 0 || width == 0 {
        return Err(RejectReason::InvalidSize);
    }

    let is_click = match field("is_click")?.trim() {
        "0" => 0,
        "1" => 1,
        _ => return Err(RejectReason::InvalidIsClick),
    };

    let money = |name: &str| -> Result<Money, RejectReason> {
        let m = Money::parse(field(name)?).map_err(|_| RejectReason::InvalidCost)?;
        if m.is_negative() {
            return Err(RejectReason::InvalidCost);
        }
        Ok(m)
    };
    let media_cost_usd = money("media_cost_usd")?;
    let data_cost_usd = money("data_cost_usd")?;

    let geo_country = field("geo_country")?.to_string();
    if !filter.geo_allowlist.is_empty() && !filter.geo_allowlist.iter().any(|c| c == &geo_country) {
        return Err(RejectReason::GeoFiltered);
    }

    Ok(RawEventRow {
        timestamp,
        height,
        width,
        device_type: DeviceType::parse(field("device_type")?),
        operating_system: field("operating_system")?.to_string(),
        browser: field("browser")?.to_string(),
        fold_position: FoldPosition::parse(field("fold_position")?),
        geo_country,
        geo_region: field("geo_region")?.to_string(),
        seller_member_id: field("seller_member_id")?.to_string(),
        tag_id: field("tag_id")?.to_string(),
        publisher_id: field("publisher_id")?.to_string(),
        site_domain: field("site_domain")?.to_string(),
        insertion_order_id: field("insertion_order_id")?.to_string(),
        advertiser_id: field("advertiser_id")?.to_string(),
        is_click,
        media_cost_usd,
        data_cost_usd,
    })
}

/// Derived columns: `size = "WxH"`, `geo = country + "-" + region`,
/// realized cost = media cost + data cost.
pub fn derive_features(row: &RawEventRow) -> (FeatureCombination, u8, Money) {
    let key = FeatureCombination {
        site_domain: row.site_domain.clone(),
        device_type: row.device_type.as_str().to_string(),
        size: format!("{}x{}", row.width, row.height),
        fold_position: row.fold_position.as_str().to_string(),
        geo: format!("{}-{}", row.geo_country, row.geo_region),
        operating_system: row.operating_system.clone(),
        browser: row.browser.clone(),
        seller_member_id: row.seller_member_id.clone(),
        tag_id: row.tag_id.clone(),
        publisher_id: row.publisher_id.clone(),
    };
    (key, row.is_click, row.media_cost_usd + row.data_cost_usd)
}

/// Split rows into the network feed (campaign identifiers never influence
/// grouping) and the campaign feed for one insertion order.
pub fn split_network_campaign<'a>(
    rows: &'a [RawEventRow],
    campaign_id: &str,
) -> Result<(Vec<&'a RawEventRow>, Vec<&'a RawEventRow>), PipelineError> {
    if campaign_id.is_empty() {
        return Err(PipelineError::Config("campaign id must be non-empty".into()));
    }
    let network: Vec<&RawEventRow> = rows.iter().collect();
    let campaign: Vec<&RawEventRow> = rows
        .iter()
        .filter(|r| r.insertion_order_id == campaign_id)
        .collect();
    Ok((network, campaign))
}

/// Serialize accepted rows back to the feed format; inverse of `parse_feed`
/// for valid rows.
pub fn write_rows(out: impl Write, rows: &[RawEventRow]) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(LOGICAL_FIELDS)?;
    for row in rows {
        writer.write_record([
            row.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            row.height.to_string(),
            row.width.to_string(),
            row.device_type.as_str().to_string(),
            row.operating_system.clone(),
            row.browser.clone(),
            match row.fold_position {
                FoldPosition::Above => "1".to_string(),
                FoldPosition::Below => "0".to_string(),
                FoldPosition::Unknown => String::new(),
            },
            row.geo_country.clone(),
            row.geo_region.clone(),
            row.seller_member_id.clone(),
            row.tag_id.clone(),
            row.publisher_id.clone(),
            row.site_domain.clone(),
            row.insertion_order_id.clone(),
            row.advertiser_id.clone(),
            row.is_click.to_string(),
            row.media_cost_usd.to_string(),
            row.data_cost_usd.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_rejects(out: impl Write, rejects: &[RejectRecord]) -> Result<(), PipelineError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["row_number", "reason"])?;
    for r in rejects {
        writer.write_record([r.row_number.to_string(), r.reason.as_str().to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const HEADER: &str = "timestamp,height,width,device_type,operating_system,browser,fold_position,geo_country,geo_region,seller_member_id,tag_id,publisher_id,site_domain,insertion_order_id,advertiser_id,is_click,media_cost_usd,data_cost_usd";

    fn row_line(is_click: &str) -> String {
        format!(
            "2021-01-01T10:00:00Z,250,300,Mobile,Android,Chrome,1,US,501,s1,t1,p1,analyticsindiamag.com,IO1,ADV1,{is_click},0.002,0.001"
        )
    }

    fn parse(body: &str) -> ParseOutcome {
        let input = format!("{HEADER}\n{body}");
        parse_feed(input.as_bytes(), &FeedSchema::default(), &IngestFilter::default()).unwrap()
    }

    #[test]
    fn well_formed_row_accepted() {
        let out = parse(&row_line("0"));
        assert_eq!(out.rows.len(), 1);
        assert!(out.rejects.is_empty());
        assert_eq!(out.rows[0].media_cost_usd, Money::parse("0.002").unwrap());
    }

    #[test]
    fn invalid_is_click_rejected() {
        let out = parse(&row_line("2"));
        assert!(out.rows.is_empty());
        assert_eq!(
            out.rejects,
            vec![RejectRecord {
                row_number: 1,
                reason: RejectReason::InvalidIsClick
            }]
        );
    }

    #[test]
    fn missing_column_is_fatal() {
        let input = "timestamp,height\n2021-01-01T10:00:00Z,250";
        let err = parse_feed(input.as_bytes(), &FeedSchema::default(), &IngestFilter::default())
            .unwrap_err();
        assert!(matches!(err, PipelineError::MissingColumn(_)));
    }

    #[test]
    fn seeded_malformed_rows_are_counted() {
        // 1000 rows with 3 seeded bad ones; an independent per-line check
        // fixes the expected split.
        let mut lines = Vec::new();
        for i in 0..1000 {
            if [117, 502, 831].contains(&i) {
                lines.push(row_line("7"));
            } else {
                lines.push(row_line(if i % 10 == 0 { "1" } else { "0" }));
            }
        }
        let expected_bad = lines.iter().filter(|l| l.contains(",7,")).count();
        assert_eq!(expected_bad, 3);
        let out = parse(&lines.join("\n"));
        assert_eq!(out.rows.len(), 997);
        assert_eq!(out.rejects.len(), 3);
        assert_eq!(
            out.rejects.iter().map(|r| r.row_number).collect::<Vec<_>>(),
            vec![118, 503, 832]
        );
    }

    #[test]
    fn derive_features_combines_columns() {
        let out = parse(&row_line("0"));
        let (key, is_click, cost) = derive_features(&out.rows[0]);
        assert_eq!(key.size, "300x250");
        assert_eq!(key.geo, "US-501");
        assert_eq!(is_click, 0);
        assert_eq!(cost, Money::parse("0.003").unwrap());
    }

    #[test]
    fn derive_features_matches_published_example_row() {
        let line = "2021-01-01T10:00:00Z,50,300,Mobile,Android,Chrome,1,IN,0,s1,t1,p1,analyticsindiamag.com,IO1,ADV1,0,0,0";
        let out = parse(line);
        let (key, _, cost) = derive_features(&out.rows[0]);
        assert_eq!(key.site_domain, "analyticsindiamag.com");
        assert_eq!(key.device_type, "Mobile");
        assert_eq!(key.size, "300x50");
        assert_eq!(key.fold_position, "1");
        assert_eq!(cost, Money::ZERO);
    }

    #[test]
    fn split_by_insertion_order() {
        let mut lines = Vec::new();
        for i in 0..10 {
            let io = if i < 4 { "X" } else { "Y" };
            lines.push(row_line("0").replace("IO1", io));
        }
        let out = parse(&lines.join("\n"));
        let (network, campaign) = split_network_campaign(&out.rows, "X").unwrap();
        assert_eq!(network.len(), 10);
        assert_eq!(campaign.len(), 4);

        let (network, campaign) = split_network_campaign(&out.rows, "NOPE").unwrap();
        assert_eq!(network.len(), 10);
        assert!(campaign.is_empty());
    }

    #[test]
    fn advertiser_id_never_affects_network_key() {
        let lines = [
            row_line("0").replace("ADV1", "A"),
            row_line("0").replace("ADV1", "B"),
        ];
        let out = parse(&lines.join("\n"));
        let (ka, _, _) = derive_features(&out.rows[0]);
        let (kb, _, _) = derive_features(&out.rows[1]);
        assert_eq!(ka, kb);
    }

    #[test]
    fn window_filter_rejects_out_of_window() {
        let filter = IngestFilter {
            window_start: parse_timestamp("2021-01-02T00:00:00Z"),
            window_end: parse_timestamp("2021-01-09T00:00:00Z"),
            geo_allowlist: vec![],
        };
        let input = format!("{HEADER}\n{}", row_line("0"));
        let out = parse_feed(input.as_bytes(), &FeedSchema::default(), &filter).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.rejects[0].reason, RejectReason::OutOfWindow);
    }

    #[test]
    fn geo_allowlist_filters_countries() {
        let filter = IngestFilter {
            geo_allowlist: vec!["GB".to_string()],
            ..Default::default()
        };
        let input = format!("{HEADER}\n{}", row_line("0"));
        let out = parse_feed(input.as_bytes(), &FeedSchema::default(), &filter).unwrap();
        assert_eq!(out.rejects[0].reason, RejectReason::GeoFiltered);
    }

    #[test]
    fn roundtrip_accepted_rows() {
        let out = parse(&format!("{}\n{}", row_line("0"), row_line("1")));
        let mut buf = Vec::new();
        write_rows(&mut buf, &out.rows).unwrap();
        let reparsed = parse_feed(buf.as_slice(), &FeedSchema::default(), &IngestFilter::default())
            .unwrap();
        assert_eq!(reparsed.rows, out.rows);
    }
}
