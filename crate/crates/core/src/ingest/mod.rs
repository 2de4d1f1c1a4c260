//! Raw data parsing and the dataset filters.

pub mod checkins;
pub mod filters;
pub mod geocoder;
pub mod postal;

pub use checkins::{parse_checkins, write_checkins, LinePolicy, MalformedLine, ParsedCheckins};
pub use filters::{
    apply_filters, filter_by_category, filter_loyal_users, CategoryAllowlist, FilterCounts,
};
pub use geocoder::{
    Address, FixtureBackend, FixtureRecord, GeocoderBackend, GeocoderClient, PlaceInfo,
};
pub use postal::{normalize_postal_code, parse_postal_table, PostalColumns, PostalTable};
