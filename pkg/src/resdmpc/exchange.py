"""In-process neighbor message bus with per-round barriers."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingNeighborData, TopologyViolation

log = logging.getLogger(__name__)

NOMINAL = "nominal"
DEVIATION = "deviation"
SENSITIVITIES = "sensitivities"
CONTRACT = "contract"
KINDS = (NOMINAL, DEVIATION, SENSITIVITIES, CONTRACT)


@dataclass(frozen=True)
class NominalCoeffs:
    values: np.ndarray  # (stages, n_z), first row is the current step


@dataclass(frozen=True)
class Deviation:
    nominal: np.ndarray
    deviation: np.ndarray


@dataclass(frozen=True)
class Sensitivities:
    s_a: np.ndarray  # d coupling / d attack, (n_z, n_u)
    s_z: np.ndarray  # d coupling / d incoming couplings, (n_z, n_zN)


@dataclass(frozen=True)
class ContractMsg:
    contract: Any


_PAYLOAD_KIND = {NominalCoeffs: NOMINAL, Deviation: DEVIATION, Sensitivities: SENSITIVITIES,
                 ContractMsg: CONTRACT}


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    round: int
    payload: Any

    @property
    def kind(self) -> str:
        for cls, kind in _PAYLOAD_KIND.items():
            if isinstance(self.payload, cls):
                return kind
        raise TypeError(f"unknown payload type {type(self.payload).__name__}")


class Bus:
    """Routes messages along graph edges; each (round, receiver, kind, sender) holds one message."""

    def __init__(self, neighbors: Mapping[str, Sequence[str]]) -> None:
        self._neighbors = {k: tuple(v) for k, v in neighbors.items()}
        self._box: dict[tuple[int, str, str, str], Message] = {}
        self._cond = threading.Condition()

    def neighbors(self, name: str) -> tuple[str, ...]:
        return self._neighbors[name]

    def post(self, message: Message) -> bool:
        message.kind  # reject unknown payloads early
        if message.sender not in self._neighbors:
            raise TopologyViolation(f"unregistered sender {message.sender}")
        if message.receiver not in self._neighbors[message.sender]:
            raise TopologyViolation(f"{message.receiver} is not a neighbor of {message.sender}")
        key = (message.round, message.receiver, message.kind, message.sender)
        with self._cond:
            if key in self._box:
                log.info("replacing %s message %s->%s in round %d", message.kind,
                         message.sender, message.receiver, message.round)
            self._box[key] = message
            self._cond.notify_all()
        return True

    def broadcast(self, sender: str, round_: int, payloads: Mapping[str, Any] | Any) -> None:
        """Send one payload to every neighbor (or a per-neighbor mapping)."""
        for nb in self._neighbors[sender]:
            body = payloads[nb] if isinstance(payloads, Mapping) else payloads
            self.post(Message(sender, nb, round_, body))

    def collect(self, receiver: str, round_: int, kinds: Iterable[str],
                timeout: float | None = 0.0) -> list[Message]:
        """One message per neighbor and kind, ordered by sender then kind."""
        kinds = list(kinds)
        wanted = [(round_, receiver, kind, nb) for nb in sorted(self._neighbors[receiver]) for kind in kinds]
        with self._cond:
            ready = self._cond.wait_for(lambda: all(k in self._box for k in wanted),
                                        timeout=timeout)
            if not ready:
                missing = [f"{k[3]}:{k[2]}" for k in wanted if k not in self._box]
                raise MissingNeighborData(f"{receiver} round {round_}: missing {', '.join(missing)}")
            return [self._box[k] for k in wanted]

    def close_round(self, round_: int) -> None:
        with self._cond:
            for key in [k for k in self._box if k[0] <= round_]:
                del self._box[key]


def post(bus: Bus, message: Message) -> bool:
    return bus.post(message)


def collect(bus: Bus, receiver: str, round_: int, kinds: Iterable[str],
            timeout: float | None = 0.0) -> list[Message]:
    return bus.collect(receiver, round_, kinds, timeout)
