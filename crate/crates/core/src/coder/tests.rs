use super::*;
use crate::entropy::{build_cdf_tables, FactorizedPrior};
use crate::rng;
use proptest::prelude::*;
use rand::Rng;

fn table_from_freqs(support: u16, freqs: &[u32]) -> CdfTable {
    assert_eq!(freqs.len(), 2 * support as usize + 2);
    assert_eq!(freqs.iter().sum::<u32>(), TOTAL_FREQ);
    let mut cum = vec![0u32];
    for &f in freqs {
        cum.push(cum.last().unwrap() + f);
    }
    CdfTable { support, cum }
}

fn uniform_table(support: u16) -> CdfTable {
    let num = 2 * support as usize + 2;
    let base = TOTAL_FREQ / num as u32;
    let mut freqs = vec![base; num];
    freqs[num - 1] = TOTAL_FREQ - base * (num as u32 - 1);
    table_from_freqs(support, &freqs)
}

fn sample_symbols(table: &CdfTable, n: usize, seed: u64) -> Vec<i32> {
    let mut r = rng::substream(&[0xc0de, seed]);
    (0..n)
        .map(|_| {
            let mut sym = table.symbol_at(r.gen_range(0..TOTAL_FREQ));
            if sym == table.escape_symbol() {
                sym = table.symbol_of(0);
            }
            table.value_of(sym)
        })
        .collect()
}

fn roundtrip(symbols: &[i32], tables: &[CdfTable], latent: (u32, u32)) -> Bitstream {
    let stream = encode(symbols, tables, (64, 64), latent).unwrap();
    let bytes = stream.to_bytes();
    let back = Bitstream::from_bytes(&bytes).unwrap();
    assert_eq!(decode(&back).unwrap(), symbols);
    back
}

#[test]
fn roundtrips_in_range_symbols() {
    let prior = FactorizedPrior::new(2);
    let tables = build_cdf_tables(&prior, None).unwrap();
    let plane = 12 * 9;
    let mut symbols = sample_symbols(&tables[0], plane, 1);
    symbols.extend(sample_symbols(&tables[1], plane, 2));
    roundtrip(&symbols, &tables, (12, 9));
}

#[test]
fn roundtrips_a_thousand_random_streams() {
    let mut r = rng::substream(&[0xc0de, 99]);
    for case in 0..1000u64 {
        let support = r.gen_range(1..=12u16);
        let table = uniform_table(support);
        let n = r.gen_range(1..=32usize);
        let hi = support as i32 + 4; // escapes included
        let symbols: Vec<i32> = (0..n).map(|_| r.gen_range(-hi..=hi)).collect();
        let stream = encode(&symbols, &[table], (8, 8), (1, n as u32)).unwrap();
        assert_eq!(decode(&stream).unwrap(), symbols, "case {case}");
    }
}

#[test]
fn escape_values_roundtrip() {
    let table = uniform_table(4);
    let symbols = vec![0, -3, 3000, 4, -15000, 32000, -32768, 1];
    roundtrip(&symbols, &[table], (1, 8));
}

#[test]
fn escape_range_is_bounded() {
    let table = uniform_table(4);
    assert!(encode(&[40000], &[table.clone()], (8, 8), (1, 1)).is_err());
    assert!(encode(&[-33000], &[table], (8, 8), (1, 1)).is_err());
}

#[test]
fn payload_length_tracks_ideal_code_length() {
    let mut freqs = vec![1u32; 10]; // support 4 -> 10 symbols
    freqs[2] = 30000;
    freqs[4] = 20000;
    freqs[6] = TOTAL_FREQ - 30000 - 20000 - 7;
    let table = table_from_freqs(4, &freqs);
    let n = 1000;
    let symbols = sample_symbols(&table, n, 3);
    let ideal: f64 = symbols
        .iter()
        .map(|&v| {
            let q = table.freq(table.symbol_of(v)) as f64 / TOTAL_FREQ as f64;
            -q.log2()
        })
        .sum();
    let stream = encode(&symbols, &[table], (64, 64), (1, n as u32)).unwrap();
    let bits = stream.payload.len() as f64 * 8.0;
    assert!(bits <= ideal + 0.05 * n as f64 + 64.0, "bits {bits} vs ideal {ideal}");
    assert!(bits >= ideal - 8.0, "coder cannot beat its own model: {bits} vs {ideal}");
}

#[test]
fn degenerate_table_costs_almost_nothing() {
    let num = 6; // support 2
    let mut freqs = vec![1u32; num];
    freqs[2] = TOTAL_FREQ - (num as u32 - 1);
    let table = table_from_freqs(2, &freqs);
    let symbols = vec![0i32; 1000];
    let stream = encode(&symbols, &[table], (64, 64), (20, 50)).unwrap();
    assert!(stream.payload.len() <= 16, "payload {} bytes", stream.payload.len());
    assert_eq!(decode(&stream).unwrap(), symbols);
}

#[test]
fn empty_stream_roundtrips() {
    let stream = encode(&[], &[], (8, 8), (0, 0)).unwrap();
    assert!(stream.payload.is_empty());
    let back = Bitstream::from_bytes(&stream.to_bytes()).unwrap();
    assert_eq!(decode(&back).unwrap(), Vec::<i32>::new());
}

#[test]
fn header_carries_dimensions() {
    let table = uniform_table(3);
    let symbols = sample_symbols(&table, 6, 4);
    let stream = encode(&symbols, &[table], (128, 96), (2, 3)).unwrap();
    let back = Bitstream::from_bytes(&stream.to_bytes()).unwrap();
    assert_eq!((back.image_h, back.image_w), (128, 96));
    assert_eq!((back.latent_h, back.latent_w), (2, 3));
    assert_eq!(back.channels, 1);
    assert_eq!(back.num_symbols(), 6);
}

#[test]
fn bad_magic_is_rejected() {
    let table = uniform_table(2);
    let symbols = sample_symbols(&table, 4, 5);
    let mut bytes = encode(&symbols, &[table], (8, 8), (2, 2)).unwrap().to_bytes();
    bytes[0] = b'X';
    let err = Bitstream::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn truncation_is_detected() {
    let table = uniform_table(2);
    let symbols = sample_symbols(&table, 64, 6);
    let bytes = encode(&symbols, &[table], (8, 8), (8, 8)).unwrap().to_bytes();
    for cut in [bytes.len() - 1, bytes.len() - 5, 30, 10] {
        assert!(Bitstream::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn decoder_detects_payload_underrun() {
    // a stream whose header is intact but whose payload lies about its
    // length still fails cleanly inside decode()
    let table = uniform_table(2);
    let symbols = sample_symbols(&table, 64, 7);
    let mut stream = encode(&symbols, &[table], (8, 8), (8, 8)).unwrap();
    stream.payload.truncate(2);
    assert!(decode(&stream).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn random_streams_roundtrip(
        support in 1u16..16,
        seed in 0u64..1000,
        n in 1usize..64,
    ) {
        let table = uniform_table(support);
        let mut r = rng::substream(&[0xc0de, seed]);
        let hi = support as i32 * 2 + 1;
        let symbols: Vec<i32> = (0..n).map(|_| r.gen_range(-hi..=hi)).collect();
        let stream = encode(&symbols, &[table], (8, 8), (1, n as u32)).unwrap();
        let back = Bitstream::from_bytes(&stream.to_bytes()).unwrap();
        prop_assert_eq!(decode(&back).unwrap(), symbols);
    }
}
