//! Counter-mode encryption and stateful MACs shared by every protection scheme.
//!
//! Each 16-byte cipher block at physical address `pa` is encrypted with the
//! keystream `AES-128(k_enc, pa || vn)`, where the counter block is laid out as
//! `pa` in the high 64 bits and `vn` in the low 64 bits (both big-endian).
//! MACs are SipHash-2-4 keyed with `k_iv` over a length-prefixed frame of
//! `(ciphertext, pa, vn)`.

use std::fmt;
use std::hash::Hasher;

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use siphasher::sip::SipHasher24;
use thiserror::Error;

pub const CIPHER_BLOCK: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("base address {0:#x} is not aligned to a 16-byte cipher block")]
    Misaligned(u64),
    #[error("encryption and MAC keys must differ")]
    KeyReuse,
}

/// 128-bit block-cipher key (`k_enc`).
#[derive(Clone, PartialEq, Eq)]
pub struct EncryptionKey([u8; 16]);

/// 128-bit MAC key (`k_iv`).
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey([u8; 16]);

impl EncryptionKey {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }
}

impl MacKey {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }
}

// Keys never appear in debug output.
impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EncryptionKey(..)")
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

/// The pair of symmetric keys set at accelerator initialization.
#[derive(Clone, Debug)]
pub struct KeyPair {
    enc: EncryptionKey,
    mac: MacKey,
}

impl KeyPair {
    pub fn new(enc: EncryptionKey, mac: MacKey) -> Result<Self, CryptoError> {
        if enc.0 == mac.0 {
            return Err(CryptoError::KeyReuse);
        }
        Ok(Self { enc, mac })
    }

    pub fn generate<R: RngCore>(rng: &mut R) -> Self {
        loop {
            let mut enc = [0u8; 16];
            let mut mac = [0u8; 16];
            rng.fill_bytes(&mut enc);
            rng.fill_bytes(&mut mac);
            if let Ok(keys) = Self::new(EncryptionKey(enc), MacKey(mac)) {
                return keys;
            }
        }
    }

    /// Fresh keys for the next epoch, derived deterministically from these.
    pub fn derive_next(&self) -> Self {
        let mut seed = [0u8; 32];
        seed[..16].copy_from_slice(&self.enc.0);
        seed[16..].copy_from_slice(&self.mac.0);
        Self::generate(&mut ChaCha20Rng::from_seed(seed))
    }

    pub fn enc(&self) -> &EncryptionKey {
        &self.enc
    }

    pub fn mac(&self) -> &MacKey {
        &self.mac
    }
}

/// The (physical address, version number) pair fed to the block cipher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CounterValue {
    pub pa: u64,
    pub vn: u64,
}

impl CounterValue {
    pub fn to_block(self) -> [u8; 16] {
        let mut block = [0u8; 16];
        block[..8].copy_from_slice(&self.pa.to_be_bytes());
        block[8..].copy_from_slice(&self.vn.to_be_bytes());
        block
    }
}

/// 64-bit authentication tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct MacTag(pub u64);

impl MacTag {
    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(bytes: [u8; 8]) -> Self {
        Self(u64::from_le_bytes(bytes))
    }

    /// Low 56 bits, the width used inside baseline metadata lines.
    pub fn truncate56(self) -> u64 {
        self.0 & ((1 << 56) - 1)
    }
}

/// Block cipher with its key schedule expanded once.
#[derive(Clone)]
pub struct Keystream {
    cipher: Aes128,
}

impl Keystream {
    pub fn new(key: &EncryptionKey) -> Self {
        Self {
            cipher: Aes128::new(GenericArray::from_slice(&key.0)),
        }
    }

    pub fn block(&self, ctr: CounterValue) -> [u8; 16] {
        let mut block = GenericArray::from(ctr.to_block());
        self.cipher.encrypt_block(&mut block);
        block.into()
    }

    /// XORs `data` in place with the keystream for `(base_pa + 16 i, vn)`.
    pub fn apply(&self, base_pa: u64, vn: u64, data: &mut [u8]) -> Result<(), CryptoError> {
        if !base_pa.is_multiple_of(CIPHER_BLOCK) {
            return Err(CryptoError::Misaligned(base_pa));
        }
        for (i, chunk) in data.chunks_mut(CIPHER_BLOCK as usize).enumerate() {
            let pa = base_pa.wrapping_add(CIPHER_BLOCK * i as u64);
            let ks = self.block(CounterValue { pa, vn });
            for (b, k) in chunk.iter_mut().zip(ks.iter()) {
                *b ^= k;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Keystream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Keystream(..)")
    }
}

pub fn keystream_xor(
    key: &EncryptionKey,
    base_pa: u64,
    vn: u64,
    data: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let mut out = data.to_vec();
    Keystream::new(key).apply(base_pa, vn, &mut out)?;
    Ok(out)
}

/// Keyed hash over `len(ct) || ct || pa || vn`.
pub fn compute_mac(key: &MacKey, ciphertext: &[u8], base_pa: u64, vn: u64) -> MacTag {
    let mut h = SipHasher24::new_with_key(&key.0);
    h.write(&(ciphertext.len() as u64).to_le_bytes());
    h.write(ciphertext);
    h.write(&base_pa.to_le_bytes());
    h.write(&vn.to_le_bytes());
    MacTag(h.finish())
}

pub fn verify_mac(key: &MacKey, ciphertext: &[u8], base_pa: u64, vn: u64, claimed: MacTag) -> bool {
    compute_mac(key, ciphertext, base_pa, vn) == claimed
}
