//! AES-128 with CTR keystream generation, CBC chaining and XOR application.
//!
//! The cipher is the forward operator of the whole toolkit, so it is
//! implemented directly from FIPS-197 and pinned to the FIPS-197 and
//! SP 800-38A vectors in the tests. It makes no attempt at constant-time
//! behaviour.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLOCK_LEN: usize = 16;
pub const KEY_LEN: usize = 16;
const ROUNDS: usize = 10;

#[rustfmt::skip]
const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

#[rustfmt::skip]
const INV_SBOX: [u8; 256] = [
    0x52, 0x09, 0x6a, 0xd5, 0x30, 0x36, 0xa5, 0x38, 0xbf, 0x40, 0xa3, 0x9e, 0x81, 0xf3, 0xd7, 0xfb,
    0x7c, 0xe3, 0x39, 0x82, 0x9b, 0x2f, 0xff, 0x87, 0x34, 0x8e, 0x43, 0x44, 0xc4, 0xde, 0xe9, 0xcb,
    0x54, 0x7b, 0x94, 0x32, 0xa6, 0xc2, 0x23, 0x3d, 0xee, 0x4c, 0x95, 0x0b, 0x42, 0xfa, 0xc3, 0x4e,
    0x08, 0x2e, 0xa1, 0x66, 0x28, 0xd9, 0x24, 0xb2, 0x76, 0x5b, 0xa2, 0x49, 0x6d, 0x8b, 0xd1, 0x25,
    0x72, 0xf8, 0xf6, 0x64, 0x86, 0x68, 0x98, 0x16, 0xd4, 0xa4, 0x5c, 0xcc, 0x5d, 0x65, 0xb6, 0x92,
    0x6c, 0x70, 0x48, 0x50, 0xfd, 0xed, 0xb9, 0xda, 0x5e, 0x15, 0x46, 0x57, 0xa7, 0x8d, 0x9d, 0x84,
    0x90, 0xd8, 0xab, 0x00, 0x8c, 0xbc, 0xd3, 0x0a, 0xf7, 0xe4, 0x58, 0x05, 0xb8, 0xb3, 0x45, 0x06,
    0xd0, 0x2c, 0x1e, 0x8f, 0xca, 0x3f, 0x0f, 0x02, 0xc1, 0xaf, 0xbd, 0x03, 0x01, 0x13, 0x8a, 0x6b,
    0x3a, 0x91, 0x11, 0x41, 0x4f, 0x67, 0xdc, 0xea, 0x97, 0xf2, 0xcf, 0xce, 0xf0, 0xb4, 0xe6, 0x73,
    0x96, 0xac, 0x74, 0x22, 0xe7, 0xad, 0x35, 0x85, 0xe2, 0xf9, 0x37, 0xe8, 0x1c, 0x75, 0xdf, 0x6e,
    0x47, 0xf1, 0x1a, 0x71, 0x1d, 0x29, 0xc5, 0x89, 0x6f, 0xb7, 0x62, 0x0e, 0xaa, 0x18, 0xbe, 0x1b,
    0xfc, 0x56, 0x3e, 0x4b, 0xc6, 0xd2, 0x79, 0x20, 0x9a, 0xdb, 0xc0, 0xfe, 0x78, 0xcd, 0x5a, 0xf4,
    0x1f, 0xdd, 0xa8, 0x33, 0x88, 0x07, 0xc7, 0x31, 0xb1, 0x12, 0x10, 0x59, 0x27, 0x80, 0xec, 0x5f,
    0x60, 0x51, 0x7f, 0xa9, 0x19, 0xb5, 0x4a, 0x0d, 0x2d, 0xe5, 0x7a, 0x9f, 0x93, 0xc9, 0x9c, 0xef,
    0xa0, 0xe0, 0x3b, 0x4d, 0xae, 0x2a, 0xf5, 0xb0, 0xc8, 0xeb, 0xbb, 0x3c, 0x83, 0x53, 0x99, 0x61,
    0x17, 0x2b, 0x04, 0x7e, 0xba, 0x77, 0xd6, 0x26, 0xe1, 0x69, 0x14, 0x63, 0x55, 0x21, 0x0c, 0x7d,
];

const RCON: [u8; ROUNDS] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

/// Multiplication by x in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1.
#[inline(always)]
fn xtime(b: u8) -> u8 {
    (b << 1) ^ (((b >> 7) & 1) * 0x1b)
}

#[inline(always)]
fn gmul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        a = xtime(a);
        b >>= 1;
    }
    p
}

/// The eleven 16-byte round keys of AES-128.
#[derive(Clone, PartialEq, Eq)]
pub struct KeySchedule {
    round_keys: [[u8; BLOCK_LEN]; ROUNDS + 1],
}

impl fmt::Debug for KeySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeySchedule").finish_non_exhaustive()
    }
}

/// AES-128 key expansion.
pub fn expand_key(key: &[u8]) -> Result<KeySchedule> {
    let key: &[u8; KEY_LEN] = key.try_into().map_err(|_| Error::InvalidKey(key.len()))?;
    let mut words = [[0u8; 4]; 4 * (ROUNDS + 1)];
    for (i, w) in words.iter_mut().take(4).enumerate() {
        w.copy_from_slice(&key[4 * i..4 * i + 4]);
    }
    for i in 4..words.len() {
        let mut temp = words[i - 1];
        if i % 4 == 0 {
            temp.rotate_left(1);
            for b in temp.iter_mut() {
                *b = SBOX[*b as usize];
            }
            temp[0] ^= RCON[i / 4 - 1];
        }
        for j in 0..4 {
            words[i][j] = words[i - 4][j] ^ temp[j];
        }
    }
    let mut round_keys = [[0u8; BLOCK_LEN]; ROUNDS + 1];
    for (r, rk) in round_keys.iter_mut().enumerate() {
        for c in 0..4 {
            rk[4 * c..4 * c + 4].copy_from_slice(&words[4 * r + c]);
        }
    }
    Ok(KeySchedule { round_keys })
}

#[inline(always)]
fn add_round_key(state: &mut [u8; BLOCK_LEN], rk: &[u8; BLOCK_LEN]) {
    for (s, k) in state.iter_mut().zip(rk) {
        *s ^= k;
    }
}

// State layout is column-major as in FIPS-197: byte index = row + 4 * column.
#[inline(always)]
fn sub_shift_rows(state: &mut [u8; BLOCK_LEN]) {
    let s = *state;
    for c in 0..4 {
        for r in 0..4 {
            state[r + 4 * c] = SBOX[s[r + 4 * ((c + r) % 4)] as usize];
        }
    }
}

#[inline(always)]
fn inv_sub_shift_rows(state: &mut [u8; BLOCK_LEN]) {
    let s = *state;
    for c in 0..4 {
        for r in 0..4 {
            state[r + 4 * ((c + r) % 4)] = INV_SBOX[s[r + 4 * c] as usize];
        }
    }
}

#[inline(always)]
fn mix_columns(state: &mut [u8; BLOCK_LEN]) {
    for col in state.chunks_exact_mut(4) {
        let (a0, a1, a2, a3) = (col[0], col[1], col[2], col[3]);
        let all = a0 ^ a1 ^ a2 ^ a3;
        col[0] = a0 ^ all ^ xtime(a0 ^ a1);
        col[1] = a1 ^ all ^ xtime(a1 ^ a2);
        col[2] = a2 ^ all ^ xtime(a2 ^ a3);
        col[3] = a3 ^ all ^ xtime(a3 ^ a0);
    }
}

fn inv_mix_columns(state: &mut [u8; BLOCK_LEN]) {
    for col in state.chunks_exact_mut(4) {
        let a = [col[0], col[1], col[2], col[3]];
        for r in 0..4 {
            col[r] = gmul(a[r], 0x0e)
                ^ gmul(a[(r + 1) % 4], 0x0b)
                ^ gmul(a[(r + 2) % 4], 0x0d)
                ^ gmul(a[(r + 3) % 4], 0x09);
        }
    }
}

impl KeySchedule {
    pub fn round_key(&self, round: usize) -> &[u8; BLOCK_LEN] {
        &self.round_keys[round]
    }

    pub fn encrypt(&self, block: &[u8; BLOCK_LEN]) -> [u8; BLOCK_LEN] {
        let mut state = *block;
        add_round_key(&mut state, &self.round_keys[0]);
        for rk in &self.round_keys[1..ROUNDS] {
            sub_shift_rows(&mut state);
            mix_columns(&mut state);
            add_round_key(&mut state, rk);
        }
        sub_shift_rows(&mut state);
        add_round_key(&mut state, &self.round_keys[ROUNDS]);
        state
    }

    pub fn decrypt(&self, block: &[u8; BLOCK_LEN]) -> [u8; BLOCK_LEN] {
        let mut state = *block;
        add_round_key(&mut state, &self.round_keys[ROUNDS]);
        for rk in self.round_keys[1..ROUNDS].iter().rev() {
            inv_sub_shift_rows(&mut state);
            add_round_key(&mut state, rk);
            inv_mix_columns(&mut state);
        }
        inv_sub_shift_rows(&mut state);
        add_round_key(&mut state, &self.round_keys[0]);
        state
    }
}

/// Forward AES-128 on a single block given as a slice.
pub fn encrypt_block(block: &[u8], schedule: &KeySchedule) -> Result<[u8; BLOCK_LEN]> {
    let block: &[u8; BLOCK_LEN] = block
        .try_into()
        .map_err(|_| Error::InvalidBlock(block.len()))?;
    Ok(schedule.encrypt(block))
}

/// A fixed key and iv shared by every image of a dataset.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    key: [u8; KEY_LEN],
    iv: [u8; BLOCK_LEN],
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("fingerprint", &self.fingerprint())
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    key: String,
    iv: String,
    fingerprint: String,
}

impl KeyMaterial {
    pub fn new(key: &[u8], iv: &[u8]) -> Result<Self> {
        let key = key.try_into().map_err(|_| Error::InvalidKey(key.len()))?;
        let iv = iv.try_into().map_err(|_| {
            Error::InvalidArgument(format!("iv must be 16 bytes, got {}", iv.len()))
        })?;
        Ok(Self { key, iv })
    }

    /// Draws key and iv from a seeded ChaCha stream.
    pub fn from_seed(seed: u64) -> Self {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut key = [0u8; KEY_LEN];
        let mut iv = [0u8; BLOCK_LEN];
        rng.fill_bytes(&mut key);
        rng.fill_bytes(&mut iv);
        Self { key, iv }
    }

    pub fn key(&self) -> &[u8; KEY_LEN] {
        &self.key
    }

    pub fn iv(&self) -> &[u8; BLOCK_LEN] {
        &self.iv
    }

    /// First 8 bytes of SHA-256(key || iv), hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(self.iv);
        hex::encode(&h.finalize()[..8])
    }

    pub fn schedule(&self) -> KeySchedule {
        expand_key(&self.key).expect("key length is fixed")
    }

    /// Key file text: TOML with hex `key`, `iv` and `fingerprint` fields.
    pub fn to_key_file(&self) -> String {
        toml::to_string(&KeyFile {
            key: hex::encode(self.key),
            iv: hex::encode(self.iv),
            fingerprint: self.fingerprint(),
        })
        .expect("key file serializes")
    }

    pub fn from_key_file(text: &str) -> Result<Self> {
        let kf: KeyFile = toml::from_str(text).map_err(|e| Error::format("key file", e.to_string()))?;
        let key = hex::decode(kf.key.trim()).map_err(|e| Error::format("key file", format!("key: {e}")))?;
        let iv = hex::decode(kf.iv.trim()).map_err(|e| Error::format("key file", format!("iv: {e}")))?;
        let km = Self::new(&key, &iv)?;
        if km.fingerprint() != kf.fingerprint.trim() {
            return Err(Error::format(
                "key file",
                format!("fingerprint {} does not match key/iv ({})", kf.fingerprint, km.fingerprint()),
            ));
        }
        Ok(km)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_key_file(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_file()).map_err(Error::io(path))
    }
}

fn increment_be(counter: &mut [u8; BLOCK_LEN]) {
    for b in counter.iter_mut().rev() {
        let (v, carry) = b.overflowing_add(1);
        *b = v;
        if !carry {
            break;
        }
    }
}

/// Keystream generator with the key already expanded.
///
/// The counter block starts at the iv and is incremented as a 128-bit
/// big-endian integer per block.
#[derive(Debug, Clone)]
pub struct CtrKeystream {
    schedule: KeySchedule,
    iv: [u8; BLOCK_LEN],
}

impl CtrKeystream {
    pub fn new(km: &KeyMaterial) -> Self {
        Self {
            schedule: km.schedule(),
            iv: km.iv,
        }
    }

    pub fn generate(&self, n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n.next_multiple_of(BLOCK_LEN));
        let mut counter = self.iv;
        while out.len() < n {
            out.extend_from_slice(&self.schedule.encrypt(&counter));
            increment_be(&mut counter);
        }
        out.truncate(n);
        out
    }
}

/// First `n` bytes of the CTR keystream for `km`.
pub fn ctr_keystream(km: &KeyMaterial, n: usize) -> Vec<u8> {
    CtrKeystream::new(km).generate(n)
}

pub fn xor_apply(data: &[u8], keystream: &[u8]) -> Result<Vec<u8>> {
    if data.len() != keystream.len() {
        return Err(Error::LengthMismatch(format!(
            "data has {} bytes, keystream {}",
            data.len(),
            keystream.len()
        )));
    }
    Ok(data.iter().zip(keystream).map(|(d, k)| d ^ k).collect())
}

fn check_aligned(data: &[u8]) -> Result<()> {
    if data.len() % BLOCK_LEN != 0 {
        return Err(Error::LengthMismatch(format!(
            "CBC needs a multiple of {BLOCK_LEN} bytes, got {}",
            data.len()
        )));
    }
    Ok(())
}

/// CBC encryption with `km.iv` as the initial chaining block. No padding.
pub fn cbc_encrypt(data: &[u8], km: &KeyMaterial) -> Result<Vec<u8>> {
    check_aligned(data)?;
    let schedule = km.schedule();
    let mut out = Vec::with_capacity(data.len());
    let mut chain = km.iv;
    for block in data.chunks_exact(BLOCK_LEN) {
        for (c, p) in chain.iter_mut().zip(block) {
            *c ^= p;
        }
        chain = schedule.encrypt(&chain);
        out.extend_from_slice(&chain);
    }
    Ok(out)
}

pub fn cbc_decrypt(data: &[u8], km: &KeyMaterial) -> Result<Vec<u8>> {
    check_aligned(data)?;
    let schedule = km.schedule();
    let mut out = Vec::with_capacity(data.len());
    let mut prev = km.iv;
    for block in data.chunks_exact(BLOCK_LEN) {
        let block: [u8; BLOCK_LEN] = block.try_into().unwrap();
        let plain = schedule.decrypt(&block);
        out.extend(plain.iter().zip(&prev).map(|(p, c)| p ^ c));
        prev = block;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    const NIST_KEY: &str = "2b7e151628aed2a6abf7158809cf4f3c";

    #[test]
    fn key_expansion_matches_fips197_appendix_a() {
        let ks = expand_key(&h(NIST_KEY)).unwrap();
        assert_eq!(ks.round_key(0).to_vec(), h(NIST_KEY));
        assert_eq!(ks.round_key(1).to_vec(), h("a0fafe1788542cb123a339392a6c7605"));
        assert_eq!(ks.round_key(2).to_vec(), h("f2c295f27a96b9435935807a7359f67f"));
        assert_eq!(ks.round_key(10).to_vec(), h("d014f9a8c9ee2589e13f0cc8b6630ca6"));
    }

    #[test]
    fn key_expansion_deterministic_and_length_checked() {
        assert_eq!(expand_key(&[0u8; 16]).unwrap(), expand_key(&[0u8; 16]).unwrap());
        assert!(matches!(expand_key(&[0u8; 15]), Err(Error::InvalidKey(15))));
    }

    #[test]
    fn block_matches_fips197_vectors() {
        let ks = expand_key(&h(NIST_KEY)).unwrap();
        let ct = encrypt_block(&h("3243f6a8885a308d313198a2e0370734"), &ks).unwrap();
        assert_eq!(ct.to_vec(), h("3925841d02dc09fbdc118597196a0b32"));

        let ks = expand_key(&h("000102030405060708090a0b0c0d0e0f")).unwrap();
        let pt: [u8; 16] = h("00112233445566778899aabbccddeeff").try_into().unwrap();
        let ct = ks.encrypt(&pt);
        assert_eq!(ct.to_vec(), h("69c4e0d86a7b0430d8cdb78070b4c55a"));
        assert_eq!(ks.decrypt(&ct), pt);
    }

    #[test]
    fn block_rejects_wrong_length() {
        let ks = expand_key(&[0u8; 16]).unwrap();
        assert!(matches!(encrypt_block(&[0u8; 17], &ks), Err(Error::InvalidBlock(17))));
    }

    #[test]
    fn block_is_a_permutation_on_sample() {
        let ks = expand_key(&[7u8; 16]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut inputs = HashSet::new();
        let mut outputs = HashSet::new();
        for _ in 0..5000 {
            let b: [u8; 16] = rng.random();
            if inputs.insert(b) {
                assert!(outputs.insert(ks.encrypt(&b)));
                assert_eq!(ks.decrypt(&ks.encrypt(&b)), b);
            }
        }
        let b = [3u8; 16];
        assert_eq!(ks.encrypt(&b), ks.encrypt(&b));
    }

    #[test]
    fn ctr_matches_sp800_38a_f5_1() {
        let km = KeyMaterial::new(&h(NIST_KEY), &h("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff")).unwrap();
        let ks = ctr_keystream(&km, 64);
        let expected = h(concat!(
            "ec8cdf7398607cb0f2d21675ea9ea1e4",
            "362b7c3c6773516318a077d7fc5073ae",
            "6a2cc3787889374fbeb4c81b17ba6c44",
            "e89c399ff0f198c6d40a31db156cabfe"
        ));
        assert_eq!(ks, expected);
        let pt = h(concat!(
            "6bc1bee22e409f96e93d7e117393172a",
            "ae2d8a571e03ac9c9eb76fac45af8e51",
            "30c81c46a35ce411e5fbc1191a0a52ef",
            "f69f2445df4f9b17ad2b417be66c3710"
        ));
        let ct = xor_apply(&pt, &ks).unwrap();
        assert_eq!(
            ct,
            h(concat!(
                "874d6191b620e3261bef6864990db6ce",
                "9806f66b7970fdff8617187bb9fffdff",
                "5ae4df3edbd5d35e5b4f09020db03eab",
                "1e031dda2fbe03d1792170a0f3009cee"
            ))
        );
    }

    #[test]
    fn ctr_counter_carries_across_bytes() {
        let mut c = [0u8; 16];
        c[14] = 0x01;
        c[15] = 0xff;
        increment_be(&mut c);
        assert_eq!((c[14], c[15]), (0x02, 0x00));
        let mut c = [0xff; 16];
        increment_be(&mut c);
        assert_eq!(c, [0u8; 16]);
    }

    #[test]
    fn ctr_empty_and_prefix() {
        let km = KeyMaterial::from_seed(5);
        assert!(ctr_keystream(&km, 0).is_empty());
        let long = ctr_keystream(&km, 48);
        assert_eq!(ctr_keystream(&km, 16), long[..16]);
        assert_eq!(ctr_keystream(&km, 21), long[..21]);
        assert_eq!(ctr_keystream(&km, 48), long);
    }

    #[test]
    fn xor_cases() {
        let d = vec![0x0f; 8];
        let k = vec![0xf0; 8];
        assert_eq!(xor_apply(&d, &k).unwrap(), vec![0xff; 8]);
        assert_eq!(xor_apply(&d, &[0u8; 8]).unwrap(), d);
        assert_eq!(xor_apply(&xor_apply(&d, &k).unwrap(), &k).unwrap(), d);
        assert!(xor_apply(&d, &k[..7]).is_err());
    }

    #[test]
    fn cbc_matches_sp800_38a_f2_1() {
        let km = KeyMaterial::new(&h(NIST_KEY), &h("000102030405060708090a0b0c0d0e0f")).unwrap();
        let pt = h(concat!(
            "6bc1bee22e409f96e93d7e117393172a",
            "ae2d8a571e03ac9c9eb76fac45af8e51",
            "30c81c46a35ce411e5fbc1191a0a52ef",
            "f69f2445df4f9b17ad2b417be66c3710"
        ));
        let ct = cbc_encrypt(&pt, &km).unwrap();
        assert_eq!(
            ct,
            h(concat!(
                "7649abac8119b246cee98e9b12e9197d",
                "5086cb9b507219ee95db113a917678b2",
                "73bed6b8e3c1743b7116e69e22229516",
                "3ff1caa1681fac09120eca307586e1a7"
            ))
        );
        assert_eq!(cbc_decrypt(&ct, &km).unwrap(), pt);
    }

    #[test]
    fn cbc_edge_cases() {
        let km = KeyMaterial::from_seed(9);
        assert!(cbc_encrypt(&[], &km).unwrap().is_empty());
        assert!(cbc_encrypt(&[0u8; 17], &km).is_err());
        assert!(cbc_decrypt(&[0u8; 15], &km).is_err());
    }

    #[test]
    fn cbc_plaintext_change_propagates_to_every_later_block() {
        let km = KeyMaterial::from_seed(11);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut pt = vec![0u8; 16 * 32];
        rng.fill(&mut pt[..]);
        let a = cbc_encrypt(&pt, &km).unwrap();
        pt[0] ^= 1;
        let b = cbc_encrypt(&pt, &km).unwrap();
        for (i, (ba, bb)) in a.chunks(16).zip(b.chunks(16)).enumerate() {
            assert_ne!(ba, bb, "block {i} unchanged");
        }
    }

    #[test]
    fn key_file_roundtrip_and_fingerprint_check() {
        let km = KeyMaterial::from_seed(42);
        assert_eq!(km, KeyMaterial::from_seed(42));
        let text = km.to_key_file();
        assert!(text.contains("fingerprint"));
        assert_eq!(KeyMaterial::from_key_file(&text).unwrap(), km);
        let tampered = text.replace(&km.fingerprint(), "0000000000000000");
        assert!(KeyMaterial::from_key_file(&tampered).is_err());
        assert_eq!(km.fingerprint().len(), 16);
    }

    proptest::proptest! {
        #[test]
        fn ctr_xor_is_an_involution(data in proptest::collection::vec(proptest::num::u8::ANY, 0..200), seed in 0u64..1000) {
            let km = KeyMaterial::from_seed(seed);
            let ks = ctr_keystream(&km, data.len());
            let twice = xor_apply(&xor_apply(&data, &ks).unwrap(), &ctr_keystream(&km, data.len())).unwrap();
            proptest::prop_assert_eq!(twice, data);
        }

        #[test]
        fn keystream_prefix_property(n in 0usize..100, extra in 0usize..100, seed in 0u64..1000) {
            let km = KeyMaterial::from_seed(seed);
            let long = ctr_keystream(&km, n + extra);
            proptest::prop_assert_eq!(&ctr_keystream(&km, n)[..], &long[..n]);
        }
    }
}
