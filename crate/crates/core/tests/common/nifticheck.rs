use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use kdseg::nifti::{
    decompress, gzip, read_labelmap, read_volume, write_labelmap, write_volume, NiftiHeader,
};
use kdseg::volume::{LabelMap, Volume};
use kdseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const SPACING: [f64; 3] = [1.5, 0.75, 2.0];
pub const FUZZ_CASES: usize = 2000;

fn ramp_values() -> Vec<f32> {
    (0..60).map(|n| 0.25 * n as f32 - 3.0).collect()
}

fn label_values(scale: u16) -> Vec<u16> {
    let mut out = Vec::new();
    for i in 0..6 {
        for j in 0..5 {
            for k in 0..4 {
                out.push(((i + 2 * j + 3 * k) % 4) * scale);
            }
        }
    }
    out
}

pub fn reads_external_float_fixture() {
    let vol = read_volume(&fixture("f32_ramp.nii")).unwrap();
    assert_eq!(vol.dims(), [5, 4, 3]);
    assert_eq!(vol.spacing(), SPACING);
    assert_eq!(vol.data().data(), &ramp_values()[..]);
    assert_eq!(vol.orientation.qform_code, 1);
    assert_eq!(vol.orientation.sform_code, 2);
    assert_eq!(vol.orientation.qfac, -1.0);
}

pub fn byte_swapped_twin_reads_identically() {
    let native = read_volume(&fixture("f32_ramp.nii")).unwrap();
    let swapped = read_volume(&fixture("f32_ramp_be.nii")).unwrap();
    assert!(
        NiftiHeader::parse(&fixture("f32_ramp_be.nii"))
            .unwrap()
            .big_endian
    );
    assert_eq!(native, swapped);
}

pub fn scaled_int16_fixture() {
    let vol = read_volume(&fixture("i16_scaled.nii.gz")).unwrap();
    assert_eq!(vol.dims(), [2, 3, 4]);
    let expected: Vec<f32> = (0..24).map(|n| 2.0 * (n as f32 - 5.0) + 1.0).collect();
    assert_eq!(vol.data().data(), &expected[..]);
    // raw value 5 sits at n = 10
    assert_eq!(vol.data().data()[10], 11.0);
}

pub fn label_fixtures() {
    let u8s = read_labelmap(&fixture("labels_u8.nii.gz")).unwrap();
    assert_eq!(u8s.dims(), [6, 5, 4]);
    assert_eq!(u8s.labels(), &label_values(1)[..]);
    let i16s = read_labelmap(&fixture("labels_i16.nii")).unwrap();
    assert_eq!(i16s.labels(), &label_values(100)[..]);
}

fn assert_same_fields(ours: &NiftiHeader, theirs: &NiftiHeader) {
    assert_eq!(ours.dim, theirs.dim, "dim");
    assert_eq!(ours.datatype, theirs.datatype, "datatype");
    assert_eq!(ours.bitpix, theirs.bitpix, "bitpix");
    assert_eq!(ours.pixdim, theirs.pixdim, "pixdim");
    assert_eq!(ours.vox_offset, theirs.vox_offset, "vox_offset");
    assert_eq!(ours.scl_slope, theirs.scl_slope, "scl_slope");
    assert_eq!(ours.scl_inter, theirs.scl_inter, "scl_inter");
    assert_eq!(ours.xyzt_units, theirs.xyzt_units, "xyzt_units");
    assert_eq!(ours.qform_code, theirs.qform_code, "qform_code");
    assert_eq!(ours.sform_code, theirs.sform_code, "sform_code");
    assert_eq!(ours.quatern, theirs.quatern, "quatern");
    assert_eq!(ours.qoffset, theirs.qoffset, "qoffset");
    assert_eq!(ours.srow, theirs.srow, "srow");
    assert_eq!(ours.magic, theirs.magic, "magic");
}

pub fn written_headers_match_external_tool_field_by_field() {
    for name in ["labels_u8.nii.gz", "labels_i16.nii"] {
        let bytes = fixture(name);
        let theirs = NiftiHeader::parse(&decompress(&bytes).unwrap()).unwrap();
        let ours = write_labelmap(&read_labelmap(&bytes).unwrap()).unwrap();
        assert_same_fields(&NiftiHeader::parse(&ours).unwrap(), &theirs);
        // payload bytes as well
        let raw = decompress(&bytes).unwrap();
        assert_eq!(&ours[352..], &raw[352..], "{name} payload");
    }
    let bytes = fixture("f32_ramp.nii");
    let ours = write_volume(&read_volume(&bytes).unwrap()).unwrap();
    assert_same_fields(
        &NiftiHeader::parse(&ours).unwrap(),
        &NiftiHeader::parse(&bytes).unwrap(),
    );
    assert_eq!(&ours[352..], &bytes[352..]);
}

pub fn round_trips_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let dims = [
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
        ];
        let n = dims.iter().product::<usize>();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let spacing = [0.5, 1.25, 3.0];
        let vol = Volume::new(
            Tensor::new(vec![1, dims[0], dims[1], dims[2]], data).unwrap(),
            spacing,
        )
        .unwrap();
        let bytes = write_volume(&vol).unwrap();
        assert_eq!(read_volume(&bytes).unwrap(), vol);
        assert_eq!(read_volume(&gzip(&bytes)).unwrap(), vol);
        assert_eq!(write_volume(&read_volume(&bytes).unwrap()).unwrap(), bytes);

        let top = if rng.random_bool(0.5) { 255 } else { 32767 };
        let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..=top)).collect();
        let lm = LabelMap::new(dims, labels, spacing).unwrap();
        let bytes = write_labelmap(&lm).unwrap();
        assert_eq!(read_labelmap(&bytes).unwrap(), lm);
        assert_eq!(read_labelmap(&gzip(&bytes)).unwrap(), lm);
        assert_eq!(write_labelmap(&lm).unwrap(), bytes, "deterministic bytes");
    }
}

fn mutate(rng: &mut ChaCha8Rng, base: &[u8]) -> Vec<u8> {
    let mut b = base.to_vec();
    match rng.random_range(0..6) {
        // random bytes anywhere in the header
        0 => {
            for _ in 0..rng.random_range(1..8) {
                let i = rng.random_range(0..352.min(b.len()));
                b[i] = rng.random();
            }
        }
        // extreme values in the fields that drive allocation and indexing
        1 => {
            let off = [0usize, 40, 42, 44, 46, 48, 70, 72, 108][rng.random_range(0..9)];
            let v: [u8; 4] = match rng.random_range(0..5) {
                0 => [0xff; 4],
                1 => [0; 4],
                2 => [0x7f, 0xff, 0xff, 0x7f],
                3 => f32::NAN.to_le_bytes(),
                _ => rng.random(),
            };
            b[off..off + 4].copy_from_slice(&v);
        }
        // truncation
        2 => {
            let len = rng.random_range(0..b.len());
            b.truncate(len);
        }
        // bit flips in the payload and header
        3 => {
            for _ in 0..rng.random_range(1..16) {
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
            }
        }
        // scaling fields
        4 => {
            let v =
                [f32::INFINITY, f32::NAN, -0.0, 1e38, f32::MIN_POSITIVE][rng.random_range(0..5)];
            let off = if rng.random_bool(0.5) { 112 } else { 116 };
            b[off..off + 4].copy_from_slice(&v.to_le_bytes());
        }
        // gzip the mutated header then corrupt the stream
        _ => {
            let i = rng.random_range(0..352.min(b.len()));
            b[i] = rng.random();
            let mut z = gzip(&b);
            let j = rng.random_range(2..z.len());
            z[j] ^= 0x5a;
            b = z;
        }
    }
    b
}

pub fn fuzzed_headers_never_crash() {
    let bases: Vec<Vec<u8>> = [
        "f32_ramp.nii",
        "f32_ramp_be.nii",
        "i16_scaled.nii.gz",
        "labels_u8.nii.gz",
        "labels_i16.nii",
    ]
    .iter()
    .map(|n| decompress(&fixture(n)).unwrap())
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let mut rejected = 0;
    let cases = FUZZ_CASES;
    for case in 0..cases {
        let base = &bases[case % bases.len()];
        let bytes = mutate(&mut rng, base);
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let v = read_volume(&bytes);
            let l = read_labelmap(&bytes);
            (v.is_err(), l.is_err())
        }));
        match outcome {
            Ok((v, l)) => rejected += (v || l) as usize,
            Err(_) => panic!("case {case} panicked"),
        }
    }
    println!("fuzz: {cases} mutated files, {rejected} rejected with typed errors, 0 crashes");
    assert!(rejected > cases / 2);
}
