mod common;

use lstsr::codec::{
    decode, encode, format_filename, pack, unpack, unpack_with_specials, DecodeMode, CLOUD_CODE,
};

const GOLDEN: &[u8] = include_bytes!("data/golden.npg");

#[test]
fn encoding_matches_golden_bytes() {
    assert_eq!(encode(&common::golden_product()).unwrap(), GOLDEN);
}

#[test]
fn golden_decodes_to_pinned_codes() {
    let vars = decode(GOLDEN).unwrap();
    assert_eq!(vars, common::golden_product());
    let lst = &vars[0].data;
    assert_eq!(lst[[0, 0]], 0);
    assert_eq!(lst[[0, 1]], 85);
    assert_eq!(lst[[0, 2]], CLOUD_CODE);
    assert_eq!(lst[[0, 3]], -7315);
    assert_eq!(lst[[1, 0]], 8685);
    assert_eq!(lst[[1, 1]], -2192);
    assert_eq!(lst[[1, 3]], i16::MIN);
    assert_eq!(vars[1].data[[2, 0]], 17999);
    assert_eq!(
        format_filename(&vars[0].header).unwrap(),
        "LST_METOPA_202008201030_DAY_v1.0.npg"
    );
}

#[test]
fn golden_repacks_identically() {
    for var in decode(GOLDEN).unwrap() {
        let u = unpack_with_specials(&var, DecodeMode::Strict).unwrap();
        let again = lstsr::codec::pack_with_specials(&u.grid, &var.header, &u.specials).unwrap();
        assert_eq!(again, var);
    }
    let satzen = &decode(GOLDEN).unwrap()[1];
    assert_eq!(
        &pack(&unpack(satzen).unwrap(), &satzen.header).unwrap(),
        satzen
    );
}
