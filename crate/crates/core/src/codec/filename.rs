//! Product filenames: `LST_<SATELLITE>_<YYYYMMDDhhmm>_<NODE>_<VERSION>.<ext>`.

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};

use super::{Node, PackedHeader};
use crate::error::{Error, Result};

pub const EXTENSION: &str = "npg";
const PREFIX: &str = "LST_";
const STAMP_FORMAT: &str = "%Y%m%d%H%M";

/// Fields recoverable from a product filename.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilenameFields {
    pub satellite: String,
    pub timestamp: DateTime<Utc>,
    pub node: Node,
    pub version: String,
    pub extension: String,
}

impl FilenameFields {
    pub fn from_header(h: &PackedHeader) -> Result<Self> {
        let satellite = normalize_satellite(&h.satellite);
        if satellite.is_empty() {
            return Err(Error::InvalidParams(format!(
                "satellite {:?} has no usable characters",
                h.satellite
            )));
        }
        if h.version.is_empty()
            || h.version.contains(['_', '/', '\\'])
            || h.version.chars().any(char::is_whitespace)
        {
            return Err(Error::InvalidParams(format!(
                "version {:?} cannot be encoded in a filename",
                h.version
            )));
        }
        let timestamp = h
            .timestamp
            .with_second(0)
            .and_then(|t| t.with_nanosecond(0))
            .expect("zero seconds is always valid");
        Ok(Self {
            satellite,
            timestamp,
            node: h.node,
            version: h.version.clone(),
            extension: EXTENSION.into(),
        })
    }
}

/// Uppercase ASCII alphanumerics only: "MetOp-A" becomes "METOPA".
pub fn normalize_satellite(s: &str) -> String {
    s.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

pub fn format_filename(h: &PackedHeader) -> Result<String> {
    let f = FilenameFields::from_header(h)?;
    Ok(format!(
        "{PREFIX}{}_{}_{}_{}.{}",
        f.satellite,
        f.timestamp.format(STAMP_FORMAT),
        f.node,
        f.version,
        f.extension
    ))
}

pub fn parse_filename(name: &str) -> Result<FilenameFields> {
    let err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    if !name.starts_with(PREFIX) {
        return Err(err(0, "expected LST_ prefix"));
    }
    let mut pos = PREFIX.len();

    let sat_len = name[pos..]
        .find('_')
        .ok_or_else(|| err(pos, "missing timestamp"))?;
    let satellite = &name[pos..pos + sat_len];
    if satellite.is_empty() {
        return Err(err(pos, "empty satellite"));
    }
    if let Some(i) = satellite.find(|c: char| !(c.is_ascii_uppercase() || c.is_ascii_digit())) {
        return Err(err(pos + i, "satellite must be uppercase alphanumeric"));
    }
    pos += sat_len + 1;

    let stamp = name
        .get(pos..pos + 12)
        .ok_or_else(|| err(pos, "truncated timestamp"))?;
    if let Some(i) = stamp.find(|c: char| !c.is_ascii_digit()) {
        return Err(err(pos + i, "timestamp must be 12 digits"));
    }
    let timestamp = NaiveDateTime::parse_from_str(stamp, STAMP_FORMAT)
        .map_err(|_| err(pos, "invalid timestamp"))?
        .and_utc();
    pos += 12;
    if name.as_bytes().get(pos) != Some(&b'_') {
        return Err(err(pos, "expected '_' after timestamp"));
    }
    pos += 1;

    let node = if name[pos..].starts_with("DAY_") {
        pos += 4;
        Node::Day
    } else if name[pos..].starts_with("NIGHT_") {
        pos += 6;
        Node::Night
    } else {
        return Err(err(pos, "expected DAY or NIGHT"));
    };

    let rest = &name[pos..];
    let dot = rest
        .rfind('.')
        .ok_or_else(|| err(name.len(), "missing extension"))?;
    let (version, extension) = (&rest[..dot], &rest[dot + 1..]);
    if version.is_empty() {
        return Err(err(pos, "empty version"));
    }
    if let Some(i) = version.find(['_', '/', '\\']) {
        return Err(err(pos + i, "invalid character in version"));
    }
    if extension.is_empty() {
        return Err(err(pos + dot + 1, "empty extension"));
    }
    Ok(FilenameFields {
        satellite: satellite.to_string(),
        timestamp,
        node,
        version: version.to_string(),
        extension: extension.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{profiles, ProductMeta};
    use crate::grid::GeoTransform;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn header(sat: &str, ts: DateTime<Utc>, node: Node, version: &str) -> PackedHeader {
        let meta = ProductMeta {
            timestamp: ts,
            satellite: sat.into(),
            version: version.into(),
            node,
        };
        PackedHeader::from_profile(&profiles::LST, GeoTransform::pan_arctic(), &meta)
    }

    #[test]
    fn canonical_example() {
        let h = header(
            "MetOp-A",
            Utc.with_ymd_and_hms(2020, 8, 20, 10, 30, 0).unwrap(),
            Node::Day,
            "v1.0",
        );
        assert_eq!(
            format_filename(&h).unwrap(),
            "LST_METOPA_202008201030_DAY_v1.0.npg"
        );
    }

    #[test]
    fn lowercase_satellite_normalized() {
        let h = header(
            "noaa19",
            Utc.with_ymd_and_hms(1999, 12, 31, 23, 59, 0).unwrap(),
            Node::Night,
            "v2",
        );
        assert_eq!(
            format_filename(&h).unwrap(),
            "LST_NOAA19_199912312359_NIGHT_v2.npg"
        );
    }

    #[test]
    fn unencodable_version_rejected() {
        let h = header(
            "NOAA19",
            Utc.with_ymd_and_hms(1999, 1, 1, 0, 0, 0).unwrap(),
            Node::Day,
            "v_1",
        );
        assert!(format_filename(&h).is_err());
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let cases = [
            ("XST_METOPA_202008201030_DAY_v1.0.npg", 0),
            ("LST_MetOpA_202008201030_DAY_v1.0.npg", 5),
            ("LST_METOPA_2020082010x0_DAY_v1.0.npg", 21),
            ("LST_METOPA_202013201030_DAY_v1.0.npg", 11),
            ("LST_METOPA_202008201030_NOON_v1.0.npg", 24),
            ("LST_METOPA_202008201030_DAY_v1", 30),
        ];
        for (name, expected) in cases {
            match parse_filename(name) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, expected, "{name}"),
                other => panic!("{name}: {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn parse_inverts_format(
            sat in "[A-Za-z][A-Za-z0-9-]{0,8}",
            minutes in 0i64..(60 * 24 * 365 * 45),
            night in any::<bool>(),
            version in "v[0-9]{1,2}\\.[0-9]{1,2}",
        ) {
            let ts = Utc.with_ymd_and_hms(1982, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::minutes(minutes);
            let node = if night { Node::Night } else { Node::Day };
            let h = header(&sat, ts, node, &version);
            let name = format_filename(&h).unwrap();
            let parsed = parse_filename(&name).unwrap();
            prop_assert_eq!(parsed, FilenameFields::from_header(&h).unwrap());
        }
    }
}
