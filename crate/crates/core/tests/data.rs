use std::fs;

use mimo_jscc::data::{encode_netpbm, load_directory, parse_netpbm, Dataset, ImageSource};
use mimo_jscc::Error;
use proptest::prelude::*;

#[test]
fn directory_images_are_normalized_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    // 2×2 white and black, plus a file that is not an image
    fs::write(
        dir.path().join("a.ppm"),
        b"P6\n2 2\n255\n"
            .iter()
            .chain(&[255u8; 12])
            .copied()
            .collect::<Vec<_>>(),
    )
    .unwrap();
    fs::write(dir.path().join("b.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let d = load_directory::<f64>(dir.path(), [3, 2, 2]).unwrap();
    assert_eq!(d.len(), 2);
    assert!(d.image(0).iter().all(|v| *v == 1.0));
    assert!(d.image(1).iter().all(|v| *v == 0.0));
    let via_source = Dataset::<f64>::load(
        &ImageSource::Directory {
            path: dir.path().into(),
        },
        [3, 2, 2],
        0,
    )
    .unwrap();
    assert_eq!(via_source, d);
}

#[test]
fn corrupt_file_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("good.pgm"), b"P2\n1 1\n255\n7\n").unwrap();
    fs::write(dir.path().join("broken.ppm"), b"P6\n4 4\n255\n\x01\x02").unwrap();
    match load_directory::<f32>(dir.path(), [1, 1, 1]) {
        Err(Error::Ingest { path, .. }) => assert!(path.ends_with("broken.ppm")),
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn empty_or_missing_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_directory::<f64>(dir.path(), [1, 2, 2]),
        Err(Error::Ingest { .. })
    ));
    assert!(matches!(
        load_directory::<f64>(&dir.path().join("nope"), [1, 2, 2]),
        Err(Error::Io { .. })
    ));
}

#[test]
fn batches_stack_images_in_index_order() {
    let d = Dataset::<f64>::procedural([3, 8, 8], 5, 2);
    let b = d.batch(&[3, 1]).unwrap();
    assert_eq!(b.shape(), &[2, 3, 8, 8]);
    assert_eq!(&b.data()[..192], d.image(3));
    assert_eq!(&b.data()[192..], d.image(1));
    assert!(d.batch(&[5]).is_err());
}

proptest! {
    #[test]
    fn netpbm_encoding_round_trips_at_8_bits(c in prop::sample::select(vec![1usize, 3]), h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let n = c * h * w;
        let pixels: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 97)) % 256) as f64 / 255.0).collect();
        let bytes = encode_netpbm([c, h, w], &pixels).unwrap();
        let r = parse_netpbm(&bytes).unwrap();
        prop_assert_eq!((r.channels, r.height, r.width), (c, h, w));
        // raster is interleaved, pixels are planar
        for k in 0..c {
            for p in 0..h * w {
                prop_assert!((r.pixels[p * c + k] - pixels[k * h * w + p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn procedural_images_stay_in_range(seed in any::<u64>()) {
        let d = Dataset::<f32>::procedural([3, 6, 6], 3, seed);
        for i in 0..d.len() {
            prop_assert!(d.image(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
