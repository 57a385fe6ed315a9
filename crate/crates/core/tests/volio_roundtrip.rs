use std::fs;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use probatlas::volio::{
    encode_native, encode_nifti, mask_apply, read_volume, write_nifti, write_volume, Grid, IntensityVolume,
    LabelVolume, ProbMap, Volume, NATIVE_HEADER_LEN,
};
use probatlas::Error;
use proptest::prelude::*;

#[test]
fn native_two_cube_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::new([2, 2, 2], [1.0, 1.5, 2.0]).unwrap();
    let vol: Volume = IntensityVolume::new(g, vec![0.0, -1.5, 3.25, 1e6, -0.0, 7.0, 8.0, f32::MIN_POSITIVE])
        .unwrap()
        .into();
    let path = dir.path().join("a.vol");
    write_volume(&vol, &path).unwrap();
    let first = fs::read(&path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back, vol);
    write_volume(&back, &path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn half_prob_map_payload() {
    let g = Grid::cube([3, 2, 2]).unwrap();
    let bytes = encode_native(&ProbMap::filled(g, 0.5).unwrap().into());
    assert_eq!(bytes.len(), NATIVE_HEADER_LEN + 12 * 4);
    for chunk in bytes[NATIVE_HEADER_LEN..].chunks(4) {
        assert_eq!(chunk, 0.5f32.to_le_bytes());
    }
}

#[test]
fn bad_magic_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.vol");
    let mut bytes = vec![0u8; 400];
    bytes[..4].copy_from_slice(b"bad!");
    fs::write(&path, bytes).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::Format(_))));
}

#[test]
fn gzip_nifti_reads_like_plain() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::new([4, 3, 2], [0.75, 1.0, 1.25]).unwrap();
    let vol: Volume = LabelVolume::new(g.clone(), (0..24).map(|i| (i % 5) as u16).collect(), 5)
        .unwrap()
        .into();
    let plain = dir.path().join("s.nii");
    write_nifti(&vol, &plain).unwrap();
    let gz = dir.path().join("s.nii.gz");
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&encode_nifti(&vol)).unwrap();
    fs::write(&gz, enc.finish().unwrap()).unwrap();
    let a = read_volume(&plain).unwrap();
    let b = read_volume(&gz).unwrap();
    assert_eq!(a, b);
    // NIfTI pixdim is f32, so the spacings are chosen to be exact there
    assert_eq!(a.grid(), &g);
    assert_eq!(
        a.into_label().unwrap().voxels(),
        vol.clone().into_label().unwrap().voxels()
    );
}

#[test]
fn header_image_pair_reads_payload_from_sibling() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::cube([2, 2, 2]).unwrap();
    let vals: Vec<f32> = (0..8).map(|i| i as f32 * 0.25).collect();
    let single = encode_nifti(&IntensityVolume::new(g, vals.clone()).unwrap().into());
    let mut hdr = single[..348].to_vec();
    hdr[344..348].copy_from_slice(b"ni1\0");
    // vox_offset is 0 for a pair
    hdr[108..112].copy_from_slice(&0f32.to_le_bytes());
    let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.path().join("p.hdr"), hdr).unwrap();
    fs::write(dir.path().join("p.img"), payload).unwrap();
    let v = read_volume(dir.path().join("p.hdr")).unwrap().into_intensity().unwrap();
    assert_eq!(v.voxels(), vals.as_slice());
}

#[test]
fn missing_file_is_io_error_naming_the_path() {
    let err = read_volume("/nonexistent/dir/x.vol").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/x.vol"));
}

fn arb_grid() -> impl Strategy<Value = Grid> {
    (1usize..5, 1usize..5, 1usize..5, 0.5f64..3.0)
        .prop_map(|(x, y, z, s)| Grid::new([x, y, z], [s, 1.0, s * 0.5]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_round_trip(g in arb_grid(), seed in any::<u64>(), k in 1u16..300) {
        let n = g.len();
        let vox: Vec<u16> = (0..n).map(|i| ((seed >> (i % 48)) as u16 ^ i as u16) % k).collect();
        let vol: Volume = LabelVolume::new(g, vox, k).unwrap().into();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.vol");
        write_volume(&vol, &p).unwrap();
        prop_assert_eq!(read_volume(&p).unwrap(), vol.clone());
        let q = dir.path().join("l.nii");
        write_nifti(&vol, &q).unwrap();
        let back = read_volume(&q).unwrap().into_label().unwrap();
        let orig = vol.into_label().unwrap();
        prop_assert_eq!(back.voxels(), orig.voxels());
    }

    #[test]
    fn reals_round_trip(g in arb_grid(), vals in prop::collection::vec(-1e6f32..1e6, 64)) {
        let n = g.len();
        let vol: Volume = IntensityVolume::new(g.clone(), vals[..n].to_vec()).unwrap().into();
        let prob: Volume = ProbMap::new(g, vals[..n].iter().map(|v| (v.abs() / 1e6).min(1.0)).collect()).unwrap().into();
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("i.vol", vol), ("p.vol", prob)] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            prop_assert_eq!(encode_native(&back), encode_native(&v));
        }
    }

    #[test]
    fn mask_is_idempotent_and_commutes_with_scaling(
        vals in prop::collection::vec(-100f32..100.0, 27),
        bits in prop::collection::vec(any::<bool>(), 27),
        c in -4f32..4.0,
    ) {
        let g = Grid::cube([3, 3, 3]).unwrap();
        let v = IntensityVolume::new(g.clone(), vals.clone()).unwrap();
        let m = ProbMap::mask_from_fn(g.clone(), |i| bits[i]);
        let once = mask_apply(&v, &m).unwrap();
        prop_assert_eq!(mask_apply(&once, &m).unwrap(), once.clone());
        let scaled = IntensityVolume::new(g, vals.iter().map(|x| x * c).collect()).unwrap();
        let a = mask_apply(&scaled, &m).unwrap();
        for (x, y) in a.voxels().iter().zip(once.voxels()) {
            prop_assert_eq!(*x, *y * c);
        }
    }
}
