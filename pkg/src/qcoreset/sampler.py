"""Simulated quantum sampling with query accounting.

Every probability is evaluated classically; the ledger separately records
the query count a Grover-style sampler would have needed.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ContractViolation
from .rng import stream

DEFAULT_CQ = 4.0

ProbOracle = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass
class QueryLedger:
    classical_entry_reads: int = 0
    oracle_calls: int = 0
    kernel_evaluations: int = 0
    simulated_quantum_queries: int = 0
    c_q: float = DEFAULT_CQ
    qsample_calls: int = 0
    loss_queries: int = 0
    history: list = field(default_factory=list, repr=False)

    def charge_reads(self, count: int) -> None:
        self.classical_entry_reads += int(count)

    def charge_kernel(self, count: int) -> None:
        self.kernel_evaluations += int(count)

    def charge_quantum(self, count: int, tag: str = "") -> None:
        self.simulated_quantum_queries += int(count)
        if tag:
            self.history.append((tag, int(count)))

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("history")
        return d


def sampling_budget(n: int, total_prob: float, c_q: float = DEFAULT_CQ) -> int:
    """ceil(C_q * sqrt(n * sum p) * (1 + log2 n))."""
    if n <= 0 or total_prob <= 0:
        return 0
    return int(math.ceil(c_q * math.sqrt(n * total_prob) * (1.0 + math.log2(n))))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CORESET_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_probabilities(n: int, prob: ProbOracle) -> np.ndarray:
    if callable(prob):
        idx = np.arange(n)
        workers = _threads()
        if workers > 1 and n >= 4096:
            chunks = np.array_split(idx, workers)
            with ThreadPoolExecutor(workers) as ex:
                parts = list(ex.map(lambda c: np.asarray(prob(c), dtype=float), chunks))
            p = np.concatenate(parts)
        else:
            p = np.asarray(prob(idx), dtype=float)
    else:
        p = np.asarray(prob, dtype=float)
    if p.shape != (n,):
        raise ContractViolation(f"probability oracle returned shape {p.shape}, expected ({n},)")
    if not np.all(np.isfinite(p)) or p.min(initial=0.0) < 0.0 or p.max(initial=0.0) > 1.0:
        raise ContractViolation("sampling probabilities must lie in [0, 1]")
    return p


def qsample(n: int, prob: ProbOracle, ledger: QueryLedger, seed, tag: str = "qsample") -> np.ndarray:
    """Include each i in [n] independently with probability prob(i).

    ``prob`` is either a length-n array or a vectorized callable on index
    arrays.  Returns the sorted selected indices.
    """
    p = evaluate_probabilities(n, prob)
    rng = stream(seed, "qsample", tag)
    picked = np.flatnonzero(rng.random(n) < p)
    ledger.oracle_calls += n
    ledger.qsample_calls += 1
    ledger.charge_quantum(sampling_budget(n, float(p.sum()), ledger.c_q), tag)
    return picked


def qsample_with_probs(n: int, prob: ProbOracle, ledger: QueryLedger, seed, tag: str = "qsample"):
    """Like qsample but also returns the inclusion probabilities of the picks."""
    p = evaluate_probabilities(n, prob)
    picked = qsample(n, p, ledger, seed, tag)
    return picked, p[picked]


@dataclass(frozen=True)
class HalvingChain:
    levels: tuple

    @property
    def T(self) -> int:
        return len(self.levels) - 1


def halving_chain(n: int, stop_size: int, seed) -> HalvingChain:
    """S_0 in S_1 in ... in S_T = [n]; each level keeps its parent's points w.p. 1/2."""
    if not 1 <= stop_size <= n:
        raise ContractViolation(f"stop_size must lie in [1, n], got {stop_size} with n={n}")
    T = int(math.ceil(math.log2(n / stop_size))) if n > stop_size else 0
    rng = stream(seed, "halving_chain")
    levels = [np.arange(n)]
    for _ in range(T):
        cur = levels[-1]
        levels.append(cur[rng.random(cur.size) < 0.5])
    return HalvingChain(tuple(reversed(levels)))
