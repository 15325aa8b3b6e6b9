use std::path::Path;

use proptest::prelude::*;

use tokenct::io::checkpoint::{Checkpoint, NamedTensor};
use tokenct::io::rvol::{decode_rvol, encode_rvol};
use tokenct::io::text::{Config, TokenRecord, TokenSet};
use tokenct_core::preprocess::{Split, ValueKind, Volume};
use tokenct_core::vq::{Modality, TokenGrid};

fn volume() -> impl Strategy<Value = Volume> {
    ([1usize..5, 1usize..5, 1usize..5], [0.1f32..10.0, 0.1f32..10.0, 0.1f32..10.0], 0u8..4).prop_flat_map(|(e, sp, tag)| {
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), e[0] * e[1] * e[2]).prop_map(move |v| {
            let kind = ValueKind::from_tag(tag).unwrap();
            Volume::new(e, sp.map(|s| s as f64), kind, v.into_iter().map(f64::from).collect()).unwrap()
        })
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    let header = prop::collection::vec(("[a-z_]{1,8}", "[a-zA-Z0-9.,]{0,12}"), 0..6);
    let tensor = prop::collection::vec(1usize..4, 0..3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        ("[a-z.]{1,10}", prop::collection::vec(any::<f32>(), n)).prop_map(move |(name, data)| NamedTensor { name, shape: shape.clone(), data })
    });
    (header, prop::collection::vec(tensor, 0..4)).prop_map(|(h, tensors)| {
        let mut c = Checkpoint { header: Vec::new(), tensors };
        for (k, v) in h {
            c.set(&k, v);
        }
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rvol_round_trip_is_bit_identical(v in volume()) {
        let bytes = encode_rvol(&v);
        let back = decode_rvol(&bytes, Path::new("p")).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(encode_rvol(&back), bytes);
    }

    #[test]
    fn rvol_rejects_every_truncation(v in volume(), cut in 1usize..64) {
        let bytes = encode_rvol(&v);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_rvol(&bytes[..keep], Path::new("p")).is_err());
    }

    #[test]
    fn checkpoint_decode_encode_is_identity(c in checkpoint()) {
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes, Path::new("c")).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.header, c.header);
    }

    #[test]
    fn config_text_round_trips(entries in prop::collection::btree_map("[a-z_]{1,8}", "[a-zA-Z0-9.,/]{0,12}", 0..8)) {
        let mut c = Config::default();
        for (k, v) in &entries {
            c.set(k, v);
        }
        prop_assert_eq!(Config::parse(&c.to_text(), Path::new("c")).unwrap(), c);
    }

    #[test]
    fn token_sets_round_trip(n in 2usize..600, rows in prop::collection::vec(prop::collection::vec(0usize..600, 12), 0..5)) {
        let mut set = TokenSet::new(n, [2, 2, 1], [2, 2, 1], [1, 2, 2]);
        for (i, r) in rows.iter().enumerate() {
            let g = |s: &[usize], m| TokenGrid::new(if m == Modality::Ct { [1, 2, 2] } else { [2, 2, 1] }, s.iter().map(|t| t % n).collect(), m, n).unwrap();
            set.records.push(TokenRecord { index: i as u64, split: Split::Validation, pa: g(&r[..4], Modality::Thrx), lat: g(&r[4..8], Modality::Thrx), ct: g(&r[8..], Modality::Ct) });
        }
        prop_assert_eq!(TokenSet::parse(&set.to_text(), Path::new("t")).unwrap(), set);
    }
}
