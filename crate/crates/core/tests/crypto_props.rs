use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use mgx_core::crypto::CounterValue;
use mgx_core::crypto::{compute_mac, keystream_xor, verify_mac, EncryptionKey, Keystream, MacKey};
use proptest::prelude::*;

fn reference_block(key: [u8; 16], pa: u64, vn: u64) -> [u8; 16] {
    let mut input = [0u8; 16];
    input[..8].copy_from_slice(&pa.to_be_bytes());
    input[8..].copy_from_slice(&vn.to_be_bytes());
    let mut b = input.into();
    Aes128::new(&key.into()).encrypt_block(&mut b);
    b.into()
}

fn aligned() -> impl Strategy<Value = u64> {
    (0u64..1 << 40).prop_map(|x| x * 16)
}

proptest! {
    #[test]
    fn keystream_is_an_involution(
        key in any::<[u8; 16]>(),
        pa in aligned(),
        vn in any::<u64>(),
        data in prop::collection::vec(any::<u8>(), 0..300),
    ) {
        let k = EncryptionKey::from_bytes(key);
        let ct = keystream_xor(&k, pa, vn, &data).unwrap();
        prop_assert_eq!(keystream_xor(&k, pa, vn, &ct).unwrap(), data);
    }

    #[test]
    fn keystream_matches_reference_cipher(key in any::<[u8; 16]>(), pa in aligned(), vn in any::<u64>()) {
        let ks = Keystream::new(&EncryptionKey::from_bytes(key));
        prop_assert_eq!(ks.block(CounterValue { pa, vn }), reference_block(key, pa, vn));
        let ct = keystream_xor(&EncryptionKey::from_bytes(key), pa, vn, &[0u8; 48]).unwrap();
        for i in 0..3u64 {
            let want = reference_block(key, pa + 16 * i, vn);
            prop_assert_eq!(&ct[16 * i as usize..16 * (i as usize + 1)], &want[..]);
        }
    }

    #[test]
    fn distinct_counters_give_distinct_pads(
        key in any::<[u8; 16]>(),
        a in (aligned(), any::<u64>()),
        b in (aligned(), any::<u64>()),
    ) {
        prop_assume!(a != b);
        let ks = Keystream::new(&EncryptionKey::from_bytes(key));
        prop_assert_ne!(ks.block(CounterValue { pa: a.0, vn: a.1 }), ks.block(CounterValue { pa: b.0, vn: b.1 }));
    }

    #[test]
    fn mac_detects_any_single_bit_change(
        key in any::<[u8; 16]>(),
        ct in prop::collection::vec(any::<u8>(), 1..256),
        pa in any::<u64>(),
        vn in any::<u64>(),
        bit in any::<prop::sample::Index>(),
        field in 0u8..3,
    ) {
        let k = MacKey::from_bytes(key);
        let tag = compute_mac(&k, &ct, pa, vn);
        prop_assert!(verify_mac(&k, &ct, pa, vn, tag));
        let (mut ct2, mut pa2, mut vn2) = (ct.clone(), pa, vn);
        match field {
            0 => {
                let i = bit.index(ct.len() * 8);
                ct2[i / 8] ^= 1 << (i % 8);
            }
            1 => pa2 ^= 1 << bit.index(64),
            _ => vn2 ^= 1 << bit.index(64),
        }
        prop_assert!(!verify_mac(&k, &ct2, pa2, vn2, tag));
    }

    #[test]
    fn mac_depends_on_key(a in any::<[u8; 16]>(), b in any::<[u8; 16]>(), ct in prop::collection::vec(any::<u8>(), 0..64)) {
        prop_assume!(a != b);
        prop_assert_ne!(
            compute_mac(&MacKey::from_bytes(a), &ct, 0, 1),
            compute_mac(&MacKey::from_bytes(b), &ct, 0, 1)
        );
    }
}

#[test]
fn misaligned_counter_base_rejected() {
    assert!(keystream_xor(&EncryptionKey::from_bytes([3; 16]), 8, 1, &[0; 16]).is_err());
}
