"""Seeded synthetic packet-record corpora for mining and benign traffic.

Flows are emitted in the client-to-server direction only. Mining flows mix
share submissions (105-110 byte mode), short keep-alive/acknowledgement
packets tied to job notifications and a few larger control messages.
Benign flows follow a bursty web-like mixture, with a small share of
heartbeat-style services as hard negatives.

The timing constants below are modelling assumptions chosen for testing,
not measurements of real pools.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cryptocatch.flows import BENIGN, COIN_LABELS, FlowKey, PacketRecord, make_record, write_labels, write_records


@dataclass(frozen=True)
class CoinProfile:
    label: str
    share_len: int  # mode of share-submission packet lengths
    small_len: int  # mode of keep-alive packet lengths
    shares_per_job: float
    jitter: float  # relative std of the job period


COIN_PROFILES = {
    c: CoinProfile(c, share, 40 + 6 * i, 1.30 + 0.05 * i, 0.01 + 0.01 * i)
    for i, (c, share) in enumerate(zip(COIN_LABELS, (105, 106, 107, 108, 109, 110, 107)))
}

SHARE_FRACTION = 0.55
SMALL_FRACTION = 0.40  # the remainder are 150-400 byte control messages
JOB_PERIOD = (20.0, 60.0)
MINING_PACKETS = (20, 50)
BENIGN_PACKETS = (5, 80)
HARD_NEGATIVE_RATE = 0.04
MINING_PORTS = (3333, 4444, 5555, 14444, 443)
BENIGN_PORTS = (443, 443, 443, 80, 8080)


@dataclass(frozen=True)
class SynthProfile:
    kind: str  # mining | benign
    coins: tuple[str, ...] = COIN_LABELS
    packets: tuple[int, int] | None = None
    hard_negative_rate: float = HARD_NEGATIVE_RATE
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mining", "benign"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        unknown = set(self.coins) - set(COIN_PROFILES)
        if unknown:
            raise ValueError(f"unknown coins {sorted(unknown)}")
        lo, hi = self.packet_range
        if not 2 <= lo <= hi:
            raise ValueError("packet range must satisfy 2 <= lo <= hi")
        if not 0 <= self.hard_negative_rate <= 1:
            raise ValueError("hard_negative_rate must lie in [0, 1]")

    @property
    def packet_range(self) -> tuple[int, int]:
        if self.packets is not None:
            return self.packets
        return MINING_PACKETS if self.kind == "mining" else BENIGN_PACKETS


@dataclass
class Corpus:
    records: list[PacketRecord] = field(default_factory=list)
    labels: dict[FlowKey, str] = field(default_factory=dict)

    def extend(self, other: "Corpus") -> "Corpus":
        self.records.extend(other.records)
        self.labels.update(other.labels)
        return self

    def sorted(self) -> "Corpus":
        # stable: equal timestamps keep generation order
        return Corpus(sorted(self.records, key=lambda r: r.ts), dict(self.labels))

    def ndjson(self) -> str:
        buf = io.StringIO()
        write_records(self.records, buf)
        return buf.getvalue()

    def labels_csv(self) -> str:
        buf = io.StringIO()
        write_labels(self.labels, buf)
        return buf.getvalue()

    def write(self, records_path, labels_path=None) -> None:
        with open(records_path, "w", encoding="utf-8", newline="\n") as fh:
            write_records(self.records, fh)
        if labels_path is not None:
            with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
                write_labels(self.labels, fh)


# ---- per-flow generators ----


def mining_flow(rng: np.random.Generator, coin: CoinProfile, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Timestamps (relative) and lengths of one mining flow with ``n`` packets."""
    period = rng.uniform(*JOB_PERIOD)
    # enough job rounds that the merged event stream surely reaches n packets
    rounds = int(np.ceil(n / (1 + coin.shares_per_job))) * 3 + 3
    jobs = period * np.arange(1, rounds + 1) + rng.normal(0, coin.jitter * period, rounds)
    ack = jobs + rng.exponential(0.05, rounds)
    horizon = float(jobs[-1])
    n_shares = rng.poisson(coin.shares_per_job * rounds)
    shares = np.sort(rng.uniform(0, horizon, n_shares))
    other_rate = (1 - SHARE_FRACTION - SMALL_FRACTION) / SMALL_FRACTION
    n_other = rng.poisson(other_rate * rounds)
    others = np.sort(rng.uniform(0, horizon, n_other))

    times = np.concatenate([ack, shares, others])
    kinds = np.concatenate([np.zeros(rounds, int), np.ones(n_shares, int), np.full(n_other, 2)])
    order = np.argsort(times, kind="stable")[:n]
    times, kinds = times[order], kinds[order]
    lengths = np.empty(n, dtype=int)
    lengths[kinds == 0] = coin.small_len + rng.integers(-2, 3, int(np.sum(kinds == 0)))
    lengths[kinds == 1] = np.clip(coin.share_len + rng.integers(-1, 2, int(np.sum(kinds == 1))), 105, 110)
    lengths[kinds == 2] = rng.integers(150, 401, int(np.sum(kinds == 2)))
    return times - times[0], lengths


def benign_flow(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Bursty web-like flow: short intra-burst gaps, longer think times."""
    which = rng.choice(3, size=n, p=[0.40, 0.35, 0.25])
    lengths = np.empty(n, dtype=int)
    lengths[which == 0] = rng.integers(40, 101, int(np.sum(which == 0)))
    mid = np.exp(rng.normal(np.log(350), 0.6, int(np.sum(which == 1))))
    lengths[which == 1] = np.clip(np.round(mid), 111, 1299).astype(int)
    lengths[which == 2] = rng.integers(1300, 1461, int(np.sum(which == 2)))
    burst_gap = rng.uniform(0.001, 0.05)
    think = rng.uniform(0.5, 8.0)
    new_burst = rng.uniform(size=n) < 0.15
    gaps = np.where(new_burst, rng.exponential(think, n), rng.exponential(burst_gap, n))
    gaps[0] = 0.0
    return np.cumsum(gaps), lengths


def heartbeat_flow(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Periodic keep-alive service (chat, telemetry): a benign look-alike."""
    period = rng.uniform(10.0, 40.0)
    gaps = period * (1 + rng.normal(0, 0.08, n))
    gaps[0] = 0.0
    small = rng.uniform(size=n) < 0.45
    lengths = np.where(small, rng.integers(40, 81, n), rng.integers(90, 131, n))
    return np.cumsum(np.abs(gaps)), lengths


# ---- corpus assembly ----


class _KeyFactory:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[FlowKey] = set()

    def make(self, dst_ip: str, dst_port: int, proto: str = "TCP") -> FlowKey:
        while True:
            a, b, c = (int(v) for v in self.rng.integers(0, 256, 3))
            src = f"10.{a}.{b}.{max(c, 1)}"
            key = FlowKey(src, int(self.rng.integers(32768, 61000)), dst_ip, int(dst_port), proto)
            if key not in self.used:
                self.used.add(key)
                return key


def _emit(corpus: Corpus, key: FlowKey, start: float, times, lengths, label: str):
    for t, n in zip(times, lengths):
        corpus.records.append(make_record(start + float(t), key.src_ip, key.src_port, key.dst_ip,
                                          key.dst_port, key.proto, int(n)))
    corpus.labels[key] = label


def _random_destination(rng, kind: str) -> tuple[str, int]:
    if kind == "mining":
        return f"198.51.100.{int(rng.integers(1, 255))}", int(rng.choice(MINING_PORTS))
    return f"203.0.113.{int(rng.integers(1, 255))}", int(rng.choice(BENIGN_PORTS))


def _one_flow(rng, profile: SynthProfile, coin: str | None, heartbeat: bool):
    n = int(rng.integers(profile.packet_range[0], profile.packet_range[1] + 1))
    if profile.kind == "mining":
        return mining_flow(rng, COIN_PROFILES[coin], n)
    return heartbeat_flow(rng, n) if heartbeat else benign_flow(rng, n)


def _generate(profile: SynthProfile, flows: int, destinations, keys: _KeyFactory, start_span: float) -> Corpus:
    rng = np.random.default_rng(profile.seed)
    corpus = Corpus()
    for i in range(flows):
        coin = profile.coins[i % len(profile.coins)] if profile.kind == "mining" else None
        heartbeat = profile.kind == "benign" and rng.uniform() < profile.hard_negative_rate
        dst = destinations[i % len(destinations)] if destinations else _random_destination(rng, profile.kind)
        key = keys.make(*dst)
        times, lengths = _one_flow(rng, profile, coin, heartbeat)
        _emit(corpus, key, float(rng.uniform(0, start_span)), times, lengths, coin or BENIGN)
    return corpus


def synthesize(profile: SynthProfile, flows: int, destinations: Sequence[tuple[str, int]] | None = None,
               start_span: float = 3600.0) -> Corpus:
    """Generate ``flows`` labelled flows for ``profile``, ordered by timestamp.

    Mining flows cycle through ``profile.coins`` so class sizes stay
    balanced; their label is the coin name. Benign flows are labelled
    ``benign``. ``destinations``, when given, are used round-robin.
    """
    if flows < 1:
        raise ValueError("flows must be >= 1")
    keys = _KeyFactory(np.random.default_rng([profile.seed, 1]))
    return _generate(profile, flows, destinations, keys, start_span).sorted()


def synthesize_mixed(mining_flows: int, benign_flows: int, seed: int = 0,
                     pool_destinations: Sequence[tuple[str, int]] | None = None,
                     benign_destinations: Sequence[tuple[str, int]] | None = None,
                     heartbeat_destinations: Sequence[tuple[str, int]] = (),
                     start_span: float = 3600.0) -> Corpus:
    """Mining and benign traffic in one time-ordered stream.

    ``heartbeat_destinations`` receive only periodic keep-alive flows, which
    makes them the likeliest classifier false positives.
    """
    if mining_flows < 0 or benign_flows < 0:
        raise ValueError("flow counts must be >= 0")
    keys = _KeyFactory(np.random.default_rng([seed, 1]))
    corpus = Corpus()
    if mining_flows:
        corpus.extend(_generate(SynthProfile("mining", seed=seed), mining_flows, pool_destinations, keys, start_span))
    if benign_flows:
        prof = SynthProfile("benign", seed=seed + 1)
        corpus.extend(_generate(prof, benign_flows, benign_destinations, keys, start_span))
    if heartbeat_destinations:
        per = max(1, benign_flows // max(1, 4 * len(heartbeat_destinations)))
        hb = SynthProfile("benign", hard_negative_rate=1.0, packets=(20, 50), seed=seed + 2)
        corpus.extend(_generate(hb, per * len(heartbeat_destinations), heartbeat_destinations, keys, start_span))
    return corpus.sorted()
