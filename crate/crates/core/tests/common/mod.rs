//! Shared synthetic feed generation for integration tests. Everything is
//! driven by a small LCG so fixtures are identical across runs and
//! platforms.

#![allow(dead_code)]

pub const FEED_HEADER: &str = "timestamp,height,width,device_type,operating_system,browser,fold_position,geo_country,geo_region,seller_member_id,tag_id,publisher_id,site_domain,insertion_order_id,advertiser_id,is_click,media_cost_usd,data_cost_usd";

pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[(self.next() % items.len() as u64) as usize]
    }
}

const DOMAINS: &[&str] = &[
    "news.example.com",
    "sports.example.org",
    "weather.example.net",
    "games.example.io",
    "video.example.tv",
    "mail.example.com",
    "blog.example.dev",
    "shop.example.store",
];
const DEVICES: &[&str] = &["Desktop", "Mobile", "Tablet"];
const SIZES: &[(&str, &str)] = &[("300", "250"), ("300", "50"), ("728", "90"), ("160", "600")];
const REGIONS: &[&str] = &["501", "803", "602", "807"];
const CAMPAIGNS: &[&str] = &["IO-A", "IO-B"];

fn row(rng: &mut Lcg, is_click: u8) -> String {
    let (width, height) = *rng.pick(SIZES);
    let day = rng.next() % 7 + 1;
    let hour = rng.next() % 24;
    let media = rng.next() % 40 + 5; // 0.0005 .. 0.0044 USD in 1e-4 units
    let data = rng.next() % 10;
    format!(
        "2021-01-0{day}T{hour:02}:00:00Z,{height},{width},{device},{os},{browser},{fold},US,{region},seller{seller},tag{tag},pub{publisher},{domain},{campaign},ADV1,{is_click},0.{media:04},0.{data:04}",
        device = rng.pick(DEVICES),
        os = rng.pick(&["Windows", "Android", "iOS"]),
        browser = rng.pick(&["Chrome", "Safari", "Firefox"]),
        fold = rng.pick(&["1", "0"]),
        region = rng.pick(REGIONS),
        seller = rng.next() % 3,
        tag = rng.next() % 5,
        publisher = rng.next() % 3,
        domain = rng.pick(DOMAINS),
        campaign = rng.pick(CAMPAIGNS),
    )
}

/// Impression and click feed bodies: `rows` impression events plus roughly
/// one click per 40 impressions in the click stream.
pub fn synth_feeds(rows: usize, seed: u64) -> (String, String) {
    let mut rng = Lcg(seed);
    let mut impressions = String::from(FEED_HEADER);
    impressions.push('\n');
    let mut clicks = String::from(FEED_HEADER);
    clicks.push('\n');
    for i in 0..rows {
        if i % 40 == 7 {
            clicks.push_str(&row(&mut rng, 1));
            clicks.push('\n');
        } else {
            impressions.push_str(&row(&mut rng, 0));
            impressions.push('\n');
        }
    }
    (impressions, clicks)
}
