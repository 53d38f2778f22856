use chrono::TimeZone;
use ndarray::array;

use lstsr::codec::{
    pack_with_specials, profiles, Node, PackedGrid, PackedHeader, ProductMeta, SpecialCell,
    CLOUD_CODE,
};
use lstsr::{GeoTransform, Grid2D};

/// Fixed two-variable product whose encoding is stored under `tests/data`.
pub fn golden_product() -> Vec<PackedGrid> {
    let meta = ProductMeta {
        timestamp: chrono::Utc
            .with_ymd_and_hms(2020, 8, 20, 10, 30, 0)
            .unwrap(),
        satellite: "MetOp-A".into(),
        version: "v1.0".into(),
        node: Node::Day,
    };
    let geo = GeoTransform::new(-179.0, 89.0, 0.01, 3, 4).unwrap();
    let lst = Grid2D::from_values(
        geo,
        array![
            [273.15, 274.0, f64::NAN, 200.0],
            [360.0, 251.234, 299.995, f64::NAN],
            [263.7, 263.705, 263.715, 288.888],
        ],
    )
    .unwrap();
    let satzen = Grid2D::from_values(
        geo,
        array![
            [0.0, 12.5, 33.33, 68.0],
            [1.0, 2.0, 3.0, 4.0],
            [179.99, f64::NAN, 45.0, 90.0]
        ],
    )
    .unwrap();
    let cloud = [SpecialCell {
        row: 0,
        col: 2,
        code: CLOUD_CODE,
    }];
    vec![
        pack_with_specials(
            &lst,
            &PackedHeader::from_profile(&profiles::LST_GAC, geo, &meta),
            &cloud,
        )
        .unwrap(),
        pack_with_specials(
            &satzen,
            &PackedHeader::from_profile(&profiles::SATZEN, geo, &meta),
            &[],
        )
        .unwrap(),
    ]
}
