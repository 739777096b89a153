"""Proof of driving: signed distance beacons that discount the sealing puzzle.

A vehicle earns the right to seal by driving. Its self-signed beacons since
its previous seal add up to a driving score, and every doubling of
``1 + score / unit_m`` removes one leading-zero bit from the hash target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional, Sequence, Tuple

from .crypto import Hash32, double_sha256, sign, verify_quiet
from .encoding import Reader, Writer

DEFAULT_UNIT_M = 1000
_BEACON_DOMAIN = b"ivchain/beacon\x00"
NEVER_SEALED = -1


class BadBeaconSignature(ValueError):
    pass


class NonMonotonicTick(ValueError):
    pass


@dataclass(frozen=True)
class DrivingBeacon:
    vehicle_ivtp_id: Hash32
    tick: int
    distance_m: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        w = Writer().hash32(self.vehicle_ivtp_id).u64(self.tick).u64(self.distance_m)
        return _BEACON_DOMAIN + w.getvalue()

    def encode(self, w: Optional[Writer] = None) -> bytes:
        w = w or Writer()
        w.hash32(self.vehicle_ivtp_id).u64(self.tick).u64(self.distance_m).blob(self.signature)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "DrivingBeacon":
        return cls(r.hash32(), r.u64(), r.u64(), r.blob())

    def signed(self, secret: bytes) -> "DrivingBeacon":
        return replace(self, signature=sign(secret, self.signing_bytes()))

    def verify(self, public_key: bytes) -> bool:
        return verify_quiet(public_key, self.signing_bytes(), self.signature)


def make_beacon(vehicle_ivtp_id: Hash32, secret: bytes, tick: int, distance_m: int) -> DrivingBeacon:
    return DrivingBeacon(vehicle_ivtp_id, tick, distance_m).signed(secret)


@dataclass(frozen=True)
class DrivingScore:
    vehicle_ivtp_id: Hash32
    accumulated_m: int = 0
    last_tick: int = NEVER_SEALED


def accumulate(score: DrivingScore, beacon: DrivingBeacon, public_key: bytes) -> DrivingScore:
    if beacon.vehicle_ivtp_id != score.vehicle_ivtp_id or not beacon.verify(public_key):
        raise BadBeaconSignature(f"beacon at tick {beacon.tick} does not verify")
    if beacon.tick <= score.last_tick:
        raise NonMonotonicTick(f"tick {beacon.tick} <= last seen {score.last_tick}")
    return replace(
        score,
        accumulated_m=score.accumulated_m + beacon.distance_m,
        last_tick=beacon.tick,
    )


def effective_difficulty(
    base_difficulty: int, score: DrivingScore | int, unit_m: int = DEFAULT_UNIT_M
) -> int:
    """``max(1, base - floor(log2(1 + meters / unit_m)))`` in exact integers."""
    if base_difficulty < 1:
        raise ValueError("base difficulty must be at least 1")
    if unit_m < 1:
        raise ValueError("unit_m must be positive")
    meters = score.accumulated_m if isinstance(score, DrivingScore) else int(score)
    if meters < 0:
        raise ValueError("driving score cannot be negative")
    # floor(log2(x)) == floor(log2(floor(x))) for x >= 1
    discount = ((unit_m + meters) // unit_m).bit_length() - 1
    return max(1, base_difficulty - discount)


@dataclass(frozen=True)
class PodProof:
    beacons: Tuple[DrivingBeacon, ...] = ()
    claimed_score_m: int = 0

    @classmethod
    def from_beacons(cls, beacons: Iterable[DrivingBeacon]) -> "PodProof":
        beacons = tuple(beacons)
        return cls(beacons, sum(b.distance_m for b in beacons))

    def beacons_bytes(self) -> bytes:
        w = Writer().count(len(self.beacons))
        for b in self.beacons:
            b.encode(w)
        return w.getvalue()

    @property
    def digest(self) -> Hash32:
        return double_sha256(self.beacons_bytes())

    def encode(self, w: Optional[Writer] = None) -> bytes:
        w = w or Writer()
        w.u64(self.claimed_score_m).count(len(self.beacons))
        for b in self.beacons:
            b.encode(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "PodProof":
        claimed = r.u64()
        beacons = tuple(DrivingBeacon.read(r) for _ in range(r.count()))
        return cls(beacons, claimed)


EMPTY_POD = PodProof()


def pod_failure(
    header,
    proof: PodProof,
    registry: Mapping[Hash32, bytes],
    last_seal_tick: Mapping[Hash32, int],
    base_difficulty: int,
    unit_m: int = DEFAULT_UNIT_M,
) -> Optional[str]:
    """Return the first reason ``proof`` does not entitle ``header`` to seal, else None."""
    sealer = header.sealer_ivtp_id
    public_key = registry.get(sealer)
    if public_key is None:
        return "UnknownSealer"
    floor_tick = last_seal_tick.get(sealer, NEVER_SEALED)
    total = 0
    for beacon in proof.beacons:
        if beacon.vehicle_ivtp_id != sealer:
            return "ForeignBeacon"
        if not beacon.verify(public_key):
            return "BadBeaconSignature"
        if beacon.tick <= floor_tick:
            return "StaleBeacon"
        if beacon.tick > header.timestamp_ms:
            return "FutureBeacon"
        floor_tick = beacon.tick
        total += beacon.distance_m
    if total != proof.claimed_score_m:
        return "ClaimedScoreMismatch"
    if proof.digest != header.pod_digest:
        return "PodDigestMismatch"
    if header.difficulty != effective_difficulty(base_difficulty, total, unit_m):
        return "WrongDifficulty"
    if header.block_hash().leading_zero_bits() < header.difficulty:
        return "PuzzleUnsolved"
    return None


def verify_pod(
    header,
    proof: PodProof,
    registry: Mapping[Hash32, bytes],
    last_seal_tick: Mapping[Hash32, int],
    base_difficulty: int,
    unit_m: int = DEFAULT_UNIT_M,
) -> bool:
    return pod_failure(header, proof, registry, last_seal_tick, base_difficulty, unit_m) is None


def beacons_since(beacons: Sequence[DrivingBeacon], after_tick: int, until_tick: int) -> Tuple[DrivingBeacon, ...]:
    """The unspent beacons a vehicle may present when sealing at ``until_tick``."""
    return tuple(b for b in beacons if after_tick < b.tick <= until_tick)
