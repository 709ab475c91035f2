use cavstat::ingest::{read_any, read_matrix, read_matrix_from, write_csv_matrix, write_matrix, Dtype};
use cavstat::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a file byte by byte, independently of the writer.
fn hand_file(version: u16, dtype: u8, rows: u64, cols: u64, payload: &[u8]) -> Vec<u8> {
    let mut b = b"CAVF".to_vec();
    b.extend_from_slice(&version.to_le_bytes());
    b.push(dtype);
    b.extend_from_slice(&rows.to_le_bytes());
    b.extend_from_slice(&cols.to_le_bytes());
    b.extend_from_slice(payload);
    b
}

#[test]
fn reads_hand_built_f32_file() {
    let payload: Vec<u8> = [1.5f32, -2.0, 0.25, 3.0, 0.0, -0.125].iter().flat_map(|v| v.to_le_bytes()).collect();
    let m = read_matrix_from(&hand_file(1, 0, 2, 3, &payload)[..]).unwrap();
    assert_eq!(m.shape(), (2, 3));
    assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.5, -2.0, 0.25]);
    assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![3.0, 0.0, -0.125]);
}

#[test]
fn written_bytes_match_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.cavf");
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    write_matrix(&m, &p, Dtype::F64).unwrap();
    let payload: Vec<u8> = [1.0f64, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(std::fs::read(&p).unwrap(), hand_file(1, 1, 2, 2, &payload));
}

#[test]
fn random_matrix_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.cavf");
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let m = DMatrix::from_fn(3, 4, |_, _| f64::from_bits(rng.random::<u64>() & !(0x7ff << 52)) * 1e300);
    write_matrix(&m, &p, Dtype::F64).unwrap();
    let back = read_matrix(&p).unwrap();
    assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn float32_narrowing_ties_to_even() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("n.cavf");
    let ulp = 2f64.powi(-23);
    // 1 + ulp/2 sits halfway and rounds to the even neighbour 1; 1 + 3ulp/2 rounds up to 1 + 2ulp.
    let m = DMatrix::from_row_slice(1, 3, &[1.0 + ulp / 2.0, 1.0 + 1.5 * ulp, 1.0 + 0.75 * ulp]);
    write_matrix(&m, &p, Dtype::F32).unwrap();
    let back = read_matrix(&p).unwrap();
    assert_eq!(back.as_slice(), &[1.0, 1.0 + 2.0 * ulp, 1.0 + ulp]);
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 23 + 12);
}

#[test]
fn malformed_headers() {
    let ok = hand_file(1, 1, 1, 1, &0.5f64.to_le_bytes());
    assert_eq!(read_matrix_from(&ok[..]).unwrap()[(0, 0)], 0.5);

    let mut bad_magic = ok.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_matrix_from(&bad_magic[..]), Err(Error::Format(_))));
    assert!(matches!(read_matrix_from(&hand_file(2, 1, 1, 1, &[0; 8])[..]), Err(Error::Format(_))));
    assert!(matches!(read_matrix_from(&hand_file(1, 7, 1, 1, &[0; 8])[..]), Err(Error::Format(_))));
    assert!(matches!(read_matrix_from(&ok[..10]), Err(Error::Truncation(_))));
    assert!(matches!(read_matrix_from(&hand_file(1, 1, 2, 1, &[0; 8])[..]), Err(Error::Truncation(_))));
    assert!(matches!(read_matrix_from(&hand_file(1, 1, u64::MAX, 2, &[])[..]), Err(Error::Truncation(_))));
    assert!(matches!(read_matrix_from(&hand_file(1, 1, 1, 1, &[0; 9])[..]), Err(Error::Format(_))));
}

#[test]
fn non_finite_needs_flag() {
    let nan = f64::NAN.to_le_bytes();
    assert!(matches!(read_matrix_from(&hand_file(1, 1, 1, 1, &nan)[..]), Err(Error::Data(_))));
    let m = read_matrix_from(&hand_file(1, 0x81, 1, 1, &nan)[..]).unwrap();
    assert!(m[(0, 0)].is_nan());
}

#[test]
fn read_any_dispatches_on_magic() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = DMatrix::from_fn(4, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let (bin, csv) = (dir.path().join("a.cavf"), dir.path().join("a.csv"));
    write_matrix(&m, &bin, Dtype::F64).unwrap();
    write_csv_matrix(&m, &csv).unwrap();
    assert_eq!(read_any(&bin).unwrap(), m);
    // 17 significant digits restore every double exactly.
    assert_eq!(read_any(&csv).unwrap(), m);
}
