//! Smart-meter readings: canonical text encoding, AES-256-CTR field
//! encryption and wrapping into record transactions.
//!
//! Each field of a reading is encrypted separately. A record carries one
//! random 16-byte nonce; field `k` uses the counter block `nonce` with `k`
//! XORed into its first byte, so the three fields never share keystream.
//! On chain the nonce is stored as a prefix of the id ciphertext.
//!
//! An account's 32-byte secret is both its AES key and the seed of its
//! address.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use aes::Aes256;
use ctr::cipher::{KeyIvInit, StreamCipher};
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{Address, ContractId, Payload, Transaction, TxId};

type Aes256Ctr = ctr::Ctr128BE<Aes256>;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;

/// Bytes added to the call data for signature, nonce, gas fields and
/// addresses.
pub const ENVELOPE_BYTES: usize = 110;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum MeterError {
    #[error("key must be {KEY_LEN} bytes, got {0}")]
    BadKeyLength(usize),
    #[error("malformed plaintext: {0}")]
    MalformedPlaintext(&'static str),
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
    #[error("line {line}: {message}")]
    StreamParse { line: usize, message: String },
}

/// Energy in thousandths of a kWh.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnergyKwh(u64);

impl EnergyKwh {
    pub fn from_milli(milli_kwh: u64) -> Self {
        EnergyKwh(milli_kwh)
    }

    pub fn milli(self) -> u64 {
        self.0
    }

    pub fn kwh(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for EnergyKwh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

impl FromStr for EnergyKwh {
    type Err = MeterError;

    /// Accepts exactly the canonical form: `<int>.<3 digits>`, no sign and
    /// no leading zeros.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = MeterError::MalformedPlaintext("energy is not <int>.<3 digits>");
        let (int, frac) = s.split_once('.').ok_or_else(|| bad.clone())?;
        if frac.len() != 3 || !frac.bytes().all(|b| b.is_ascii_digit()) || !canonical_uint(int) {
            return Err(bad);
        }
        let whole: u64 = int.parse().map_err(|_| bad.clone())?;
        let frac: u64 = frac.parse().map_err(|_| bad.clone())?;
        whole
            .checked_mul(1000)
            .and_then(|w| w.checked_add(frac))
            .map(EnergyKwh)
            .ok_or(bad)
    }
}

fn canonical_uint(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'))
}

fn valid_device_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_graphic() && b != b',')
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MeterRecord {
    /// Printable ASCII without spaces or commas.
    pub device_id: String,
    /// Unix seconds.
    pub collected_at: u64,
    pub energy_kwh: EnergyKwh,
}

impl MeterRecord {
    pub fn new(device_id: impl Into<String>, collected_at: u64, energy_kwh: EnergyKwh) -> Result<Self, MeterError> {
        let device_id = device_id.into();
        if !valid_device_id(&device_id) {
            return Err(MeterError::InvalidRecord("device id must be printable ASCII without commas"));
        }
        Ok(MeterRecord { device_id, collected_at, energy_kwh })
    }
}

/// Canonical field encodings: id verbatim, time in decimal, energy with
/// three decimals.
pub fn encode_record(rec: &MeterRecord) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    (
        rec.device_id.as_bytes().to_vec(),
        rec.collected_at.to_string().into_bytes(),
        rec.energy_kwh.to_string().into_bytes(),
    )
}

/// Inverse of [`encode_record`]; rejects anything not in canonical form.
pub fn decode_record(id: &[u8], time: &[u8], value: &[u8]) -> Result<MeterRecord, MeterError> {
    let id = std::str::from_utf8(id).map_err(|_| MeterError::MalformedPlaintext("id is not text"))?;
    if !valid_device_id(id) {
        return Err(MeterError::MalformedPlaintext("id has invalid characters"));
    }
    let time = std::str::from_utf8(time).map_err(|_| MeterError::MalformedPlaintext("time is not text"))?;
    if !canonical_uint(time) {
        return Err(MeterError::MalformedPlaintext("time is not a decimal integer"));
    }
    let collected_at = time
        .parse()
        .map_err(|_| MeterError::MalformedPlaintext("time out of range"))?;
    let value = std::str::from_utf8(value).map_err(|_| MeterError::MalformedPlaintext("energy is not text"))?;
    Ok(MeterRecord { device_id: id.to_string(), collected_at, energy_kwh: value.parse()? })
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, MeterError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| MeterError::BadKeyLength(bytes.len()))?;
        Ok(SymmetricKey(arr))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill(&mut k);
        SymmetricKey(k)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// A meter account: the key doubles as the address seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Account {
    pub key: SymmetricKey,
    pub address: Address,
}

impl Account {
    pub fn from_key(key: SymmetricKey) -> Self {
        let digest = Sha256::digest(key.as_bytes());
        let mut a = [0u8; 20];
        a.copy_from_slice(&digest[12..]);
        Account { key, address: Address(a) }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Account::from_key(SymmetricKey::random(rng))
    }
}

/// AES-256 in counter mode with a 128-bit big-endian counter starting at
/// `counter0`. Encryption and decryption are the same operation.
pub fn encrypt_field(plaintext: &[u8], key: &[u8], counter0: &[u8; NONCE_LEN]) -> Result<Vec<u8>, MeterError> {
    let mut cipher =
        Aes256Ctr::new_from_slices(key, counter0).map_err(|_| MeterError::BadKeyLength(key.len()))?;
    let mut buf = plaintext.to_vec();
    cipher.apply_keystream(&mut buf);
    Ok(buf)
}

/// Counter block for field `index` of a record.
pub fn field_counter(nonce: &[u8; NONCE_LEN], index: u8) -> [u8; NONCE_LEN] {
    let mut c = *nonce;
    c[0] ^= index;
    c
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedRecord {
    pub id_ct: Vec<u8>,
    pub time_ct: Vec<u8>,
    pub value_ct: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
}

impl EncryptedRecord {
    /// The three fields as stored by the contract: the nonce travels in
    /// front of the id ciphertext.
    pub fn to_stored(&self) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let mut id = Vec::with_capacity(NONCE_LEN + self.id_ct.len());
        id.extend_from_slice(&self.nonce);
        id.extend_from_slice(&self.id_ct);
        (id, self.time_ct.clone(), self.value_ct.clone())
    }

    pub fn from_stored(id: &[u8], time: &[u8], value: &[u8]) -> Result<Self, MeterError> {
        if id.len() < NONCE_LEN {
            return Err(MeterError::MalformedPlaintext("stored id shorter than a nonce"));
        }
        let (nonce, id_ct) = id.split_at(NONCE_LEN);
        Ok(EncryptedRecord {
            id_ct: id_ct.to_vec(),
            time_ct: time.to_vec(),
            value_ct: value.to_vec(),
            nonce: nonce.try_into().expect("split at nonce length"),
        })
    }
}

pub fn encrypt_record_with_nonce(
    rec: &MeterRecord,
    key: &SymmetricKey,
    nonce: [u8; NONCE_LEN],
) -> Result<EncryptedRecord, MeterError> {
    let (id, time, value) = encode_record(rec);
    let k = key.as_bytes();
    Ok(EncryptedRecord {
        id_ct: encrypt_field(&id, k, &field_counter(&nonce, 0))?,
        time_ct: encrypt_field(&time, k, &field_counter(&nonce, 1))?,
        value_ct: encrypt_field(&value, k, &field_counter(&nonce, 2))?,
        nonce,
    })
}

/// Encrypts under a fresh random nonce drawn from `rng`.
pub fn encrypt_record<R: Rng + ?Sized>(
    rec: &MeterRecord,
    key: &SymmetricKey,
    rng: &mut R,
) -> Result<EncryptedRecord, MeterError> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill(&mut nonce);
    encrypt_record_with_nonce(rec, key, nonce)
}

pub fn decrypt_record(enc: &EncryptedRecord, key: &SymmetricKey) -> Result<MeterRecord, MeterError> {
    let k = key.as_bytes();
    let id = encrypt_field(&enc.id_ct, k, &field_counter(&enc.nonce, 0))?;
    let time = encrypt_field(&enc.time_ct, k, &field_counter(&enc.nonce, 1))?;
    let value = encrypt_field(&enc.value_ct, k, &field_counter(&enc.nonce, 2))?;
    decode_record(&id, &time, &value)
}

fn word_padded(len: usize) -> usize {
    len.div_ceil(32) * 32
}

/// Call-data size of a three-string record call: selector, three offsets,
/// then a length word and word-padded data per field.
pub fn record_call_bytes(id: &[u8], time: &[u8], value: &[u8]) -> usize {
    4 + 3 * 32 + [id, time, value].iter().map(|f| 32 + word_padded(f.len())).sum::<usize>()
}

/// Wraps an encrypted record as a `new_reco` call. The size is the call
/// data plus envelope, padded up to `min_size_kb`.
pub fn build_record_tx(
    enc: &EncryptedRecord,
    sender: Address,
    contract: ContractId,
    id: TxId,
    gas: u64,
    min_size_kb: f64,
) -> Transaction {
    let (sid, time, value) = enc.to_stored();
    let bytes = record_call_bytes(&sid, &time, &value) + ENVELOPE_BYTES;
    Transaction {
        id,
        sender,
        contract,
        payload: Arc::new(Payload::NewReco { id: sid, time, value }),
        gas,
        size_kb: (bytes as f64 / 1000.0).max(min_size_kb),
    }
}

/// Largest per-interval consumption drawn by [`simulate_meter_stream`],
/// in thousandths of a kWh.
pub const MAX_INCREMENT_MILLI_KWH: u64 = 50;

/// Cumulative readings at `start + k * interval_s` for `k = 1..=duration_s / interval_s`.
pub fn simulate_meter_stream<R: Rng + ?Sized>(
    device_id: &str,
    start: u64,
    interval_s: u64,
    duration_s: u64,
    rng: &mut R,
) -> Result<Vec<MeterRecord>, MeterError> {
    if interval_s == 0 {
        return Err(MeterError::InvalidRecord("interval must be positive"));
    }
    if !valid_device_id(device_id) {
        return Err(MeterError::InvalidRecord("device id must be printable ASCII without commas"));
    }
    let mut energy = 0u64;
    Ok((1..=duration_s / interval_s)
        .map(|k| {
            energy += rng.random_range(0..=MAX_INCREMENT_MILLI_KWH);
            MeterRecord {
                device_id: device_id.to_string(),
                collected_at: start + k * interval_s,
                energy_kwh: EnergyKwh(energy),
            }
        })
        .collect())
}

/// `device_id,unix_time,kwh` per line.
pub fn format_stream(records: &[MeterRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{},{},{}\n", r.device_id, r.collected_at, r.energy_kwh))
        .collect()
}

/// Parses [`format_stream`] output. Blank lines and `#` comments are
/// skipped; timestamps must not go backwards per device.
pub fn parse_stream(text: &str) -> Result<Vec<MeterRecord>, MeterError> {
    let mut last: std::collections::HashMap<String, u64> = Default::default();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| MeterError::StreamParse { line, message };
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = l.split(',').collect();
        let [id, time, kwh] = parts[..] else {
            return Err(err(format!("expected 3 fields, got {}", parts.len())));
        };
        let rec = decode_record(id.as_bytes(), time.as_bytes(), kwh.as_bytes()).map_err(|e| err(e.to_string()))?;
        if let Some(prev) = last.get(&rec.device_id) {
            if rec.collected_at < *prev {
                return Err(err(format!("time goes backwards for {}", rec.device_id)));
            }
        }
        last.insert(rec.device_id.clone(), rec.collected_at);
        out.push(rec);
    }
    Ok(out)
}
