use pccnn_core::data::{
    encode_idx_images, encode_idx_labels, encode_pgm, expand, parse_idx_images, parse_idx_labels, parse_pgm, quantize,
    Image, Signature,
};
use proptest::prelude::*;

#[test]
fn quantize_known_values() {
    assert_eq!(quantize(127, 2), 0);
    assert_eq!(quantize(128, 2), 1);
    assert_eq!(quantize(255, 32), 31);
    assert_eq!(quantize(7, 32), 0);
    assert_eq!(quantize(8, 32), 1);
    assert_eq!(expand(1, 2), 255);
    assert_eq!(expand(0, 32), 0);
    assert_eq!(expand(31, 32), 255);
}

#[test]
fn idx_errors_name_offsets() {
    let im = Image::new(Signature::new(2, 3, 1, 256).unwrap(), vec![0, 1, 2, 3, 4, 5]).unwrap();
    let bytes = encode_idx_images(&[im]).unwrap();
    let err = parse_idx_images(&bytes[..bytes.len() - 2]).unwrap_err().to_string();
    assert!(err.contains("2"), "{err}");
    let mut wrong = bytes.clone();
    wrong[2] = 0x0d;
    assert!(parse_idx_images(&wrong).is_err());
    assert!(parse_idx_labels(&bytes).is_err());
}

proptest! {
    #[test]
    fn quantize_expand_round_trip(levels in 2usize..=256, raw in any::<u8>()) {
        let l = quantize(raw, levels);
        prop_assert!((l as usize) < levels);
        prop_assert_eq!(quantize(expand(l, levels), levels), l);
    }

    #[test]
    fn quantize_is_monotone(levels in 2usize..=256, a in any::<u8>(), b in any::<u8>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo, levels) <= quantize(hi, levels));
    }

    #[test]
    fn idx_round_trip(h in 1usize..6, w in 1usize..6, n in 1usize..4, seed in any::<u64>()) {
        let s = Signature::new(h, w, 1, 256).unwrap();
        let images: Vec<Image> = (0..n)
            .map(|i| Image::new(s, (0..h * w).map(|j| (seed.rotate_left((i * 7 + j) as u32) & 0xff) as u8).collect()).unwrap())
            .collect();
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&images).unwrap()).unwrap(), images);
        let labels: Vec<u8> = (0..n as u8).collect();
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..8, w in 1usize..8, fill in any::<u8>()) {
        let values: Vec<u8> = (0..h * w).map(|i| fill.wrapping_add(i as u8)).collect();
        prop_assert_eq!(parse_pgm(&encode_pgm(h, w, &values)).unwrap(), (h, w, values));
    }
}
