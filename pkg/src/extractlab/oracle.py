"""Budget-metered black-box access to a secret network."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import IO

import numpy as np

from .nn import Network, one_hot, predict_proba


class BudgetExhausted(RuntimeError):
    """The requested batch would push consumption past the query budget."""


class OracleMode(str, Enum):
    TOP1 = "top1"
    SOFTMAX = "softmax"


@dataclass
class QueryLedger:
    budget: int
    consumed: int = 0
    per_call_log: list[tuple[int, int]] = field(default_factory=list)

    @property
    def remaining(self) -> int:
        return self.budget - self.consumed


class SecretOracle:
    """Answers label queries for a hidden model, charging one unit per sample.

    The check-and-charge happens under a lock, so concurrent callers see a
    total order and a rejected call never changes the ledger.
    """

    def __init__(self, model: Network, mode: OracleMode | str, budget: int):
        if budget < 0:
            raise ValueError("budget must be nonnegative")
        self.__model = model
        self._mode = OracleMode(mode)
        self._ledger = QueryLedger(int(budget))
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"SecretOracle(mode={self._mode.value}, budget={self._ledger.budget}, consumed={self._ledger.consumed})"

    @property
    def mode(self) -> OracleMode:
        return self._mode

    @property
    def input_dim(self) -> int:
        return self.__model.spec.input_dim

    @property
    def num_classes(self) -> int:
        return self.__model.spec.num_classes

    @property
    def budget(self) -> int:
        return self._ledger.budget

    @property
    def consumed(self) -> int:
        return self._ledger.consumed

    @property
    def call_log(self) -> list[tuple[int, int]]:
        return list(self._ledger.per_call_log)

    def remaining(self) -> int:
        return self._ledger.remaining

    def query(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected an (m, {self.input_dim}) batch, got shape {x.shape}")
        m = x.shape[0]
        if m < 1:
            raise ValueError("empty query batch")
        with self._lock:
            if self._ledger.consumed + m > self._ledger.budget:
                raise BudgetExhausted(
                    f"query of {m} samples exceeds remaining budget {self._ledger.remaining}"
                )
            probs = predict_proba(self.__model, x)
            self._ledger.consumed += m
            self._ledger.per_call_log.append((len(self._ledger.per_call_log), m))
        if self._mode is OracleMode.TOP1:
            return one_hot(probs.argmax(axis=1), probs.shape[1])
        return probs


def remaining(oracle: SecretOracle) -> int:
    return oracle.remaining()


# Line-delimited JSON protocol: {"id": n, "x": [[...]]} -> {"id": n, "y": [[...]]}
# or {"id": n, "error": "budget_exhausted"}.

def handle_request(oracle: SecretOracle, line: str) -> str:
    try:
        req = json.loads(line)
    except json.JSONDecodeError:
        return json.dumps({"id": None, "error": "bad_request"})
    rid = req.get("id") if isinstance(req, dict) else None
    try:
        y = oracle.query(np.asarray(req["x"], dtype=np.float64))
    except BudgetExhausted:
        return json.dumps({"id": rid, "error": "budget_exhausted"})
    except (KeyError, TypeError, ValueError):
        return json.dumps({"id": rid, "error": "bad_request"})
    return json.dumps({"id": rid, "y": y.tolist()})


def serve(oracle: SecretOracle, infile: IO[str], outfile: IO[str]) -> None:
    """Answer requests line by line until ``infile`` is exhausted."""
    for line in infile:
        if not line.strip():
            continue
        outfile.write(handle_request(oracle, line) + "\n")
        outfile.flush()


class StreamOracle:
    """Client side of the line protocol; exposes the same ``query`` surface as SecretOracle."""

    def __init__(self, writer: IO[str], reader: IO[str]):
        self._writer = writer
        self._reader = reader
        self._next_id = 0
        self._lock = threading.Lock()

    def query(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            self._writer.write(json.dumps({"id": rid, "x": x.tolist()}) + "\n")
            self._writer.flush()
            line = self._reader.readline()
        if not line:
            raise ConnectionError("oracle stream closed")
        resp = json.loads(line)
        if resp.get("id") != rid:
            raise ConnectionError(f"response id {resp.get('id')} does not match request {rid}")
        if resp.get("error") == "budget_exhausted":
            raise BudgetExhausted("remote oracle budget exhausted")
        if "error" in resp:
            raise ValueError(f"remote oracle error: {resp['error']}")
        return np.asarray(resp["y"], dtype=np.float64)
