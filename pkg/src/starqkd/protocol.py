"""Classical post-processing: sifting, error-correction accounting, privacy
amplification and one-time-pad use of the final key."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve

from .quantum_sim import IntensityClass, Transcript
from .security import DEFAULT_EC_EFFICIENCY, DEFAULT_Q, SecurityEstimate, binary_entropy


class TranscriptMismatchError(ValueError):
    pass


class ReconciliationAbort(RuntimeError):
    """QBER too high for error correction to leave any secrecy."""


class InsufficientKeyError(RuntimeError):
    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} key bits, only {available} available")
        self.requested = requested
        self.available = available


@dataclass(frozen=True)
class ClassStats:
    sent: int = 0
    clicks: int = 0
    sifted: int = 0
    errors: int = 0

    @property
    def gain(self) -> float:
        return self.clicks / self.sent if self.sent else float("nan")

    @property
    def qber(self) -> float:
        # errors are only observable on basis-matched events
        return self.errors / self.sifted if self.sifted else float("nan")


@dataclass(frozen=True)
class GainQberStats:
    signal: ClassStats
    decoy: ClassStats
    vacuum: ClassStats

    def __getitem__(self, cls) -> ClassStats:
        return (self.signal, self.decoy, self.vacuum)[int(cls)]

    @property
    def y0(self) -> float:
        return self.vacuum.gain

    @property
    def epsilon0(self) -> float:
        return self.vacuum.qber

    def as_dict(self) -> dict:
        out = {}
        for cls in IntensityClass:
            s = self[cls]
            key = cls.name.lower()
            out[key] = dict(sent=s.sent, clicks=s.clicks, sifted=s.sifted, errors=s.errors,
                            gain=s.gain, qber=s.qber)
        return out


@dataclass
class SiftedKeyPair:
    server_bits: np.ndarray
    client_bits: np.ndarray
    class_tags: np.ndarray

    def __post_init__(self):
        if not (len(self.server_bits) == len(self.client_bits) == len(self.class_tags)):
            raise TranscriptMismatchError("sifted key arrays differ in length")

    def __len__(self) -> int:
        return len(self.server_bits)

    def restrict(self, cls: IntensityClass) -> "SiftedKeyPair":
        m = self.class_tags == cls
        return SiftedKeyPair(self.server_bits[m], self.client_bits[m], self.class_tags[m])

    @property
    def error_count(self) -> int:
        return int(np.count_nonzero(self.server_bits != self.client_bits))


def sift(transcript: Transcript) -> tuple[SiftedKeyPair, GainQberStats]:
    cols = [transcript.intensity_class, transcript.basis, transcript.bit,
            transcript.receiver_basis, transcript.clicked, transcript.measured_bit]
    if len({len(c) for c in cols}) != 1:
        raise TranscriptMismatchError("transmitter and receiver streams are not aligned")
    cls = transcript.intensity_class.astype(np.int64)
    clicked = transcript.clicked
    keep = clicked & (transcript.basis == transcript.receiver_basis)
    wrong = keep & (transcript.measured_bit != transcript.bit)

    sent = np.bincount(cls, minlength=3)
    clicks = np.bincount(cls[clicked], minlength=3)
    sifted = np.bincount(cls[keep], minlength=3)
    errors = np.bincount(cls[wrong], minlength=3)
    stats = GainQberStats(*(ClassStats(int(sent[c]), int(clicks[c]), int(sifted[c]), int(errors[c]))
                            for c in range(3)))
    pair = SiftedKeyPair(transcript.bit[keep].astype(np.uint8),
                         transcript.measured_bit[keep].astype(np.uint8),
                         transcript.intensity_class[keep].copy())
    return pair, stats


@dataclass(frozen=True)
class CorrectedKey:
    bits: np.ndarray
    leaked_bits: int
    qber: float


def leakage_bits(length: int, qber: float, f: float = DEFAULT_EC_EFFICIENCY) -> int:
    return int(math.ceil(f * binary_entropy(qber) * length - 1e-9))


def error_correct(pair: SiftedKeyPair, f: float = DEFAULT_EC_EFFICIENCY,
                  qber: Optional[float] = None) -> CorrectedKey:
    """Ground-truth-assisted correction charging f * H2(E) leakage per bit.

    ``qber`` defaults to the pair's own error fraction.
    """
    n = len(pair)
    if n == 0:
        raise ValueError("cannot reconcile an empty key")
    e = pair.error_count / n if qber is None else float(qber)
    if e >= 0.5:
        raise ReconciliationAbort(f"QBER {e:.4f} >= 0.5")
    leaked = leakage_bits(n, e, f)
    if leaked > n:
        # syndromes would disclose more than the key itself
        raise ReconciliationAbort(f"QBER {e:.4f} needs {leaked} leaked bits for a {n}-bit key")
    key = pair.server_bits.copy()
    pair.client_bits[:] = key
    return CorrectedKey(key, leaked, e)


def final_key_length(n_sifted: int, leaked_bits: int, estimate: SecurityEstimate,
                     q: float = DEFAULT_Q) -> int:
    """Bits surviving privacy amplification for ``n_sifted`` signal bits.

    Each sifted signal bit carries ``R / (q * Q_mu)`` secure bits.
    """
    q_mu = estimate.inputs.get("Q_mu", 0.0)
    if estimate.rate_per_pulse <= 0 or n_sifted == 0 or q_mu <= 0:
        return 0
    length = math.floor(n_sifted * estimate.rate_per_pulse / (q * q_mu))
    return max(0, min(length, n_sifted - leaked_bits))


def toeplitz_hash(bits: np.ndarray, seed_bits: np.ndarray, out_len: int) -> np.ndarray:
    """Multiply ``bits`` by the out_len x n binary Toeplitz matrix T[i, j] = seed[i - j + n - 1]."""
    n = len(bits)
    if len(seed_bits) != out_len + n - 1:
        raise ValueError("seed length must be out_len + n - 1")
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    conv = fftconvolve(seed_bits.astype(np.float64), bits.astype(np.float64))
    return (np.rint(conv[n - 1:n - 1 + out_len]).astype(np.int64) & 1).astype(np.uint8)


def privacy_amplify(key: CorrectedKey, estimate: SecurityEstimate, seed: int,
                    q: float = DEFAULT_Q) -> np.ndarray:
    n = len(key.bits)
    m = final_key_length(n, key.leaked_bits, estimate, q)
    if m == 0:
        return np.zeros(0, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    seed_bits = rng.integers(0, 2, m + n - 1, dtype=np.uint8)
    return toeplitz_hash(key.bits, seed_bits, m)


# ---------------------------------------------------------------------------
# one-time pad


class OneTimePad:
    """Key bits that can each be used exactly once."""

    def __init__(self, bits):
        self._bits = np.asarray(bits, dtype=np.uint8).copy()
        self._offset = 0
        self._lock = threading.Lock()

    @property
    def available(self) -> int:
        return len(self._bits) - self._offset

    def take(self, n_bits: int) -> np.ndarray:
        with self._lock:
            if n_bits > self.available:
                raise InsufficientKeyError(n_bits, self.available)
            out = self._bits[self._offset:self._offset + n_bits].copy()
            self._offset += n_bits
            return out


def _xor(data: bytes, pad: OneTimePad) -> bytes:
    key = np.packbits(pad.take(8 * len(data)))
    return (np.frombuffer(data, dtype=np.uint8) ^ key).tobytes()


def otp_encrypt(plaintext: bytes, pad: OneTimePad) -> bytes:
    return _xor(plaintext, pad)


def otp_decrypt(ciphertext: bytes, pad: OneTimePad) -> bytes:
    return _xor(ciphertext, pad)


# ---------------------------------------------------------------------------
# key files


def write_key_file(path, bits: np.ndarray, metadata: dict, overwrite: bool = False) -> Path:
    """Write packed key bits plus a ``.json`` sidecar with ``length_bits`` and metadata."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not overwrite and (path.exists() or sidecar.exists()):
        raise FileExistsError(path)
    path.write_bytes(np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes())
    meta = dict(metadata, length_bits=int(len(bits)))
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return path


def read_key_file(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    return np.unpackbits(raw)[: meta["length_bits"]], meta
