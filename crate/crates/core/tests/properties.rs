use gridchain_core::chain::{BlockHeader, BlockId};
use gridchain_core::consensus::{compute_difficulty, DifficultyParams};
use gridchain_core::meter::{
    decode_record, decrypt_record, encode_record, encrypt_field, encrypt_record_with_nonce, EnergyKwh, MeterRecord,
    SymmetricKey,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn parent(difficulty: u64, uncles: usize) -> BlockHeader {
    BlockHeader {
        number: 10,
        parent_id: BlockId::ZERO,
        miner: Some(1),
        difficulty,
        timestamp: 100,
        uncle_ids: vec![BlockId([3; 32]); uncles],
        gas_used: 0,
    }
}

fn device_id() -> impl Strategy<Value = String> {
    "[!-+\\--~]{1,24}"
}

proptest! {
    #[test]
    fn difficulty_is_floored_and_falls_with_longer_intervals(
        d in 131_072u64..1u64 << 50,
        lambda in 1u64..30,
        uncles in 0usize..=2,
        t in 1u64..5_000,
    ) {
        let p = DifficultyParams::with_lambda(lambda);
        let h = parent(d, uncles);
        let a = compute_difficulty(&p, &h, 11, 100 + t).unwrap();
        let b = compute_difficulty(&p, &h, 11, 100 + t + 1).unwrap();
        prop_assert!(a.result >= 131_072);
        prop_assert!(b.result <= a.result);
        prop_assert!(a.zeta >= -99 && a.zeta <= 2);
        prop_assert!(a.result <= d + 2 * (d / 2048));
    }

    #[test]
    fn uncle_parent_never_lowers_difficulty(d in 131_072u64..1u64 << 40, lambda in 1u64..20, t in 1u64..400) {
        let p = DifficultyParams::with_lambda(lambda);
        let plain = compute_difficulty(&p, &parent(d, 0), 11, 100 + t).unwrap().result;
        let with = compute_difficulty(&p, &parent(d, 1), 11, 100 + t).unwrap().result;
        prop_assert!(with >= plain);
    }

    #[test]
    fn encoding_round_trips(id in device_id(), time in any::<u64>(), milli in 0u64..u64::MAX / 2) {
        let rec = MeterRecord::new(id, time, EnergyKwh::from_milli(milli)).unwrap();
        let (i, t, v) = encode_record(&rec);
        prop_assert_eq!(decode_record(&i, &t, &v).unwrap(), rec);
    }

    #[test]
    fn encryption_round_trips(
        id in device_id(),
        time in any::<u64>(),
        milli in 0u64..10_000_000_000,
        key in any::<[u8; 32]>(),
        nonce in any::<[u8; 16]>(),
    ) {
        let key = SymmetricKey::from_slice(&key).unwrap();
        let rec = MeterRecord::new(id, time, EnergyKwh::from_milli(milli)).unwrap();
        let enc = encrypt_record_with_nonce(&rec, &key, nonce).unwrap();
        let (i, t, v) = encode_record(&rec);
        prop_assert_eq!((enc.id_ct.len(), enc.time_ct.len(), enc.value_ct.len()), (i.len(), t.len(), v.len()));
        prop_assert_eq!(decrypt_record(&enc, &key).unwrap(), rec);
    }

    #[test]
    fn raw_fields_round_trip(data in proptest::collection::vec(any::<u8>(), 0..4096), key in any::<[u8; 32]>(), ctr in any::<[u8; 16]>()) {
        let ct = encrypt_field(&data, &key, &ctr).unwrap();
        prop_assert_eq!(ct.len(), data.len());
        prop_assert_eq!(encrypt_field(&ct, &key, &ctr).unwrap(), data);
    }
}

#[test]
fn ciphertext_bytes_look_uniform() {
    // 1 MB of highly repetitive meter text, encrypted record by record
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let key = SymmetricKey::random(&mut rng);
    let mut counts = [0u64; 256];
    let mut total = 0u64;
    let mut i = 0u64;
    while total < 1 << 20 {
        let rec = MeterRecord::new("SM-01", 1_622_966_400 + 10 * i, EnergyKwh::from_milli(12_500 + i)).unwrap();
        let enc = encrypt_record_with_nonce(&rec, &key, rng.random()).unwrap();
        for b in enc.id_ct.iter().chain(&enc.time_ct).chain(&enc.value_ct) {
            counts[*b as usize] += 1;
            total += 1;
        }
        i += 1;
    }
    let expected = total as f64 / 256.0;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    // 255 degrees of freedom; 330.5 is roughly the 0.1% upper tail
    assert!(chi2 < 330.5, "chi-squared {chi2}");

    let plain: Vec<u8> = b"SM-01,1622966400,12.500\n".repeat(1 << 15);
    let mut pc = [0u64; 256];
    plain.iter().for_each(|b| pc[*b as usize] += 1);
    let e = plain.len() as f64 / 256.0;
    let plain_chi2: f64 = pc.iter().map(|c| (*c as f64 - e).powi(2) / e).sum();
    assert!(plain_chi2 > 100.0 * chi2);
}
