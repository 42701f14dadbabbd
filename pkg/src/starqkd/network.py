"""Star network: one server, n clients behind an active 1xn optical switch.

The timeline is a sequence of fixed slots.  Every switch to a different
client costs ``alignment_time_s`` of dead time before pulses flow; the rest
of the slot runs the full exchange and appends one key block to that
client's buffer.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import tempfile
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import IntensitySettings, LinkParams
from .protocol import InsufficientKeyError
from .security import Variant, analytic_estimate, operating_settings
from .session import run_session


class NoClientsError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class InvalidSplitError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    kind: str = "round_robin"  # round_robin | priority | on_demand
    weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in ("round_robin", "priority", "on_demand"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "priority":
            w = self.weights
            if not w or any(x < 0 for x in w) or sum(w) <= 0:
                raise ValueError("priority weights must be nonnegative and not all zero")


@dataclass
class NetworkConfig:
    clients: list[tuple[str, LinkParams]]
    server_name: str = "server"
    switch_fanout: int = 3
    alignment_time_s: float = 0.5
    slot_duration_s: float = 2.0
    schedule: Schedule = field(default_factory=Schedule)
    buffer_capacity_bits: int = 1_000_000
    settings: Optional[dict[str, IntensitySettings]] = None
    variant: Variant = Variant.STANDARD

    def __post_init__(self):
        if self.switch_fanout < 1:
            raise ValueError("switch_fanout must be >= 1")
        if len(self.clients) > self.switch_fanout:
            raise ValueError(f"{len(self.clients)} clients exceed a 1x{self.switch_fanout} switch")
        if self.alignment_time_s < 0 or self.slot_duration_s <= 0:
            raise ValueError("alignment_time_s must be >= 0 and slot_duration_s > 0")
        if self.schedule.kind == "priority" and len(self.schedule.weights) != len(self.clients):
            raise ValueError("one priority weight per client required")
        names = [n for n, _ in self.clients]
        if len(set(names)) != len(names):
            raise ValueError("client names must be unique")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.clients]

    def link(self, name: str) -> LinkParams:
        return dict(self.clients)[name]

    def intensities(self, name: str) -> IntensitySettings:
        if self.settings and name in self.settings:
            return self.settings[name]
        return operating_settings(self.link(name))


# ---------------------------------------------------------------------------
# key buffer


@dataclass(frozen=True)
class KeyBlock:
    bits: np.ndarray
    meta: dict


class KeyBuffer:
    """Per-client FIFO of immutable key blocks with a consumed-bits watermark.

    ``consume`` is linearizable: concurrent callers never receive
    overlapping material.
    """

    def __init__(self, clients: Sequence[str] = ()):
        self._lock = threading.Lock()
        self._blocks: dict[str, list[KeyBlock]] = {c: [] for c in clients}
        self._bits: dict[str, np.ndarray] = {c: np.zeros(0, np.uint8) for c in clients}
        self._produced: dict[str, int] = {c: 0 for c in clients}
        self._watermark: dict[str, int] = {c: 0 for c in clients}

    @property
    def clients(self) -> list[str]:
        return list(self._blocks)

    def add_block(self, client: str, bits: np.ndarray, meta: Optional[dict] = None) -> None:
        bits = np.asarray(bits, dtype=np.uint8).copy()
        bits.setflags(write=False)
        with self._lock:
            self._blocks.setdefault(client, []).append(KeyBlock(bits, dict(meta or {})))
            self._bits[client] = np.concatenate([self._bits.get(client, np.zeros(0, np.uint8)), bits])
            self._produced[client] = self._produced.get(client, 0) + len(bits)
            self._watermark.setdefault(client, 0)

    def produced(self, client: str) -> int:
        return self._produced.get(client, 0)

    def consumed(self, client: str) -> int:
        return self._watermark.get(client, 0)

    def available(self, client: str) -> int:
        with self._lock:
            return self._produced.get(client, 0) - self._watermark.get(client, 0)

    def blocks(self, client: str) -> list[KeyBlock]:
        return list(self._blocks.get(client, []))

    def fill_ratio(self, client: str, capacity_bits: int) -> float:
        return self.available(client) / capacity_bits if capacity_bits > 0 else 0.0

    def consume(self, client: str, n_bits: int) -> np.ndarray:
        if n_bits < 0:
            raise ValueError("n_bits must be >= 0")
        with self._lock:
            start = self._watermark.get(client, 0)
            avail = self._produced.get(client, 0) - start
            if n_bits > avail:
                raise InsufficientKeyError(n_bits, avail)
            out = self._bits[client][start:start + n_bits].copy() if n_bits else np.zeros(0, np.uint8)
            self._watermark[client] = start + n_bits
            return out

    # persistence --------------------------------------------------------

    def save(self, directory, overwrite: bool = False) -> Path:
        """Write ``<client>.bin`` (packed bits) per client plus ``watermarks.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta_path = d / "watermarks.json"
        if meta_path.exists() and not overwrite:
            raise FileExistsError(meta_path)
        with self._lock:
            meta = {}
            for c in self._blocks:
                (d / f"{c}.bin").write_bytes(np.packbits(self._bits[c]).tobytes())
                meta[c] = dict(produced_bits=self._produced[c], watermark=self._watermark[c],
                               blocks=[b.meta for b in self._blocks[c]])
        _atomic_write_json(meta_path, meta)
        return d


def _atomic_write_json(path: Path, data) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)
    os.replace(tmp, path)


class KeyStore:
    """File-backed key buffer written by :meth:`KeyBuffer.save`.

    The watermark file is rewritten only after the caller has received the
    material (on clean exit from :meth:`reserve`), so a crash never marks
    unseen bits as used.
    """

    def __init__(self, directory):
        self.dir = Path(directory)
        self._lock = threading.Lock()
        self._meta_path = self.dir / "watermarks.json"
        if not self._meta_path.exists():
            raise FileNotFoundError(self._meta_path)

    def _meta(self) -> dict:
        return json.loads(self._meta_path.read_text())

    def available(self, client: str) -> int:
        m = self._meta()
        if client not in m:
            raise KeyError(f"no key material for client {client!r}")
        return m[client]["produced_bits"] - m[client]["watermark"]

    @contextlib.contextmanager
    def reserve(self, client: str, n_bits: int):
        with self._lock:
            meta = self._meta()
            if client not in meta:
                raise KeyError(f"no key material for client {client!r}")
            entry = meta[client]
            start = entry["watermark"]
            avail = entry["produced_bits"] - start
            if n_bits > avail:
                raise InsufficientKeyError(n_bits, avail)
            raw = np.frombuffer((self.dir / f"{client}.bin").read_bytes(), dtype=np.uint8)
            bits = np.unpackbits(raw)[start:start + n_bits].copy()
            yield bits
            entry["watermark"] = start + n_bits
            _atomic_write_json(self._meta_path, meta)

    def consume(self, client: str, n_bits: int) -> np.ndarray:
        with self.reserve(client, n_bits) as bits:
            return bits


def consume_key(buffer: KeyBuffer, client: str, n_bits: int) -> np.ndarray:
    return buffer.consume(client, n_bits)


# ---------------------------------------------------------------------------
# scheduling


@dataclass
class SchedulerState:
    slot: int = 0
    served: dict[str, int] = field(default_factory=dict)
    current: Optional[str] = None


def schedule_next(state: SchedulerState, config: NetworkConfig,
                  buffer: Optional[KeyBuffer] = None) -> tuple[str, int]:
    """Pick the client for the next slot and advance ``state``."""
    names = config.names
    if not names:
        raise NoClientsError("network has no clients")
    kind = config.schedule.kind
    if kind == "round_robin":
        choice = names[state.slot % len(names)]
    elif kind == "priority":
        w = np.asarray(config.schedule.weights, dtype=float)
        # smooth weighted round robin: serve the client furthest behind its quota
        quota = w / w.sum() * (state.slot + 1)
        served = np.array([state.served.get(n, 0) for n in names], dtype=float)
        deficit = quota - served
        choice = names[int(np.argmax(deficit))]
    else:
        fill = [(buffer.fill_ratio(n, config.buffer_capacity_bits) if buffer else 0.0, n)
                for n in names]
        choice = min(fill)[1]
    slot = state.slot
    state.slot += 1
    state.served[choice] = state.served.get(choice, 0) + 1
    return choice, slot


# ---------------------------------------------------------------------------
# timeline


@dataclass
class ClientYield:
    name: str
    key_bits: int = 0
    productive_s: float = 0.0
    slots: int = 0

    def bps(self, total_time_s: float) -> float:
        return self.key_bits / total_time_s


@dataclass
class NetworkRun:
    config: NetworkConfig
    total_time_s: float
    seed: int
    mode: str
    yields: dict[str, ClientYield]
    events: list[dict]
    buffer: KeyBuffer

    @property
    def total_key_bits(self) -> int:
        return sum(y.key_bits for y in self.yields.values())

    def bps(self) -> dict[str, float]:
        return {n: y.bps(self.total_time_s) for n, y in self.yields.items()}

    def write_events(self, path, overwrite: bool = False) -> Path:
        path = Path(path)
        if path.exists() and not overwrite:
            raise FileExistsError(path)
        with path.open("w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True, default=str) + "\n")
        return path


def _analytic_block(link: LinkParams, settings: IntensitySettings, pulses: int,
                    variant: Variant) -> tuple[int, dict]:
    est = analytic_estimate(link, settings, variant)
    bits = max(0, math.floor(pulses * settings.signal_share * est.rate_per_pulse))
    return bits, dict(R_per_pulse=est.rate_per_pulse, R_bps=est.rate_bps)


def run_network(config: NetworkConfig, total_time_s: float, seed: int,
                mode: str = "monte_carlo") -> NetworkRun:
    """Simulate the switched network for ``total_time_s`` seconds.

    ``mode="analytic"`` replaces each slot's Monte Carlo exchange by the
    infinite-statistics key length and fills blocks with seeded random bits.
    """
    if total_time_s <= 0:
        raise ValueError("total_time_s must be positive")
    if not config.clients:
        raise NoClientsError("network has no clients")
    if config.alignment_time_s >= config.slot_duration_s:
        raise AlignmentError("alignment time leaves no productive time in a slot")
    if mode not in ("monte_carlo", "analytic"):
        raise ValueError(f"unknown mode {mode!r}")

    rng = np.random.default_rng(seed)
    buffer = KeyBuffer(config.names)
    yields = {n: ClientYield(n) for n in config.names}
    events: list[dict] = []
    state = SchedulerState()
    settings = {n: config.intensities(n) for n in config.names}
    t = 0.0
    eps = 1e-12
    while t < total_time_s - eps:
        client, slot = schedule_next(state, config, buffer)
        slot_end = min(t + config.slot_duration_s, total_time_s)
        link = config.link(client)
        if client != state.current:
            events.append(dict(timestamp_s=t, kind="switch", client=client,
                               detail=dict(slot=slot, previous=state.current)))
            align_end = min(t + config.alignment_time_s, slot_end)
            events.append(dict(timestamp_s=t, kind="alignment", client=client,
                               detail=dict(duration_s=align_end - t)))
            t = align_end
            state.current = client
        productive = slot_end - t
        pulses = int(math.floor(productive * link.pulse_rate_hz + 1e-9))
        session_seed = int(rng.integers(0, 2**63 - 1))
        if pulses > 0:
            if mode == "analytic":
                n_bits, detail = _analytic_block(link, settings[client], pulses, config.variant)
                bits = np.random.default_rng(session_seed).integers(0, 2, n_bits, dtype=np.uint8)
            else:
                res = run_session(link, settings[client], pulses, session_seed,
                                  variant=config.variant)
                bits = res.final_key
                detail = dict(R_per_pulse=res.estimate.rate_per_pulse,
                              R_bps=res.estimate.rate_bps,
                              QBER=res.stats.signal.qber, warnings=res.warnings)
            meta = dict(slot=slot, start_s=t, pulses=pulses, seed=session_seed, **detail)
            buffer.add_block(client, bits, meta)
            y = yields[client]
            y.key_bits += len(bits)
            y.productive_s += productive
            y.slots += 1
            events.append(dict(timestamp_s=t, kind="session", client=client,
                               detail=dict(meta, key_bits=int(len(bits)))))
        t = slot_end
    return NetworkRun(config, total_time_s, seed, mode, yields, events, buffer)


def passive_network_comparator(config: NetworkConfig, coupler_split: Sequence[float],
                               total_time_s: float) -> dict[str, ClientYield]:
    """Analytic yields when a passive coupler feeds every client simultaneously.

    Client i sees the source continuously with its transmittance scaled by
    ``coupler_split[i]``; intensities are re-optimised for the attenuated link.
    """
    split = [float(x) for x in coupler_split]
    if len(split) != len(config.clients) or any(x < 0 for x in split) or sum(split) > 1 + 1e-12:
        raise InvalidSplitError("one nonnegative split per client, summing to <= 1")
    out = {}
    for (name, link), frac in zip(config.clients, split):
        y = ClientYield(name, productive_s=total_time_s)
        if frac > 0:
            extra = -10.0 * math.log10(frac)
            attenuated = link.with_(extra_loss_db=link.extra_loss_db + extra)
            st = operating_settings(attenuated)
            pulses = int(math.floor(total_time_s * link.pulse_rate_hz + 1e-9))
            y.key_bits, _ = _analytic_block(attenuated, st, pulses, config.variant)
        out[name] = y
    return out


def active_network_analytic(config: NetworkConfig, total_time_s: float) -> dict[str, ClientYield]:
    """Convenience wrapper: analytic-mode :func:`run_network` yields."""
    return run_network(config, total_time_s, seed=0, mode="analytic").yields
