"""Retrieval evaluation: cosine distances, protocol masks, CMC and mAP.

Ranking sorts the non-junk gallery by ascending distance with ties broken
by ascending gallery index. Queries with no valid positive are skipped and
excluded from every denominator.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import ContractError, EvaluationError

PROTOCOLS = ("general", "same_clothes", "cloth_changing")


class Meta(NamedTuple):
    pids: np.ndarray
    cams: np.ndarray
    clothes: np.ndarray

    @classmethod
    def of(cls, pids, cams, clothes) -> "Meta":
        return cls(np.asarray(pids), np.asarray(cams), np.asarray(clothes))


@dataclass(frozen=True)
class Protocol:
    mode: str

    def __post_init__(self):
        if self.mode not in PROTOCOLS:
            raise ContractError(f"unknown protocol {self.mode!r}; valid modes: {', '.join(PROTOCOLS)}")


def parse_protocols(requested: str | Sequence[str]) -> List[Protocol]:
    names = requested.split(",") if isinstance(requested, str) else list(requested)
    names = [n.strip() for n in names if n.strip()]
    if not names:
        raise ContractError(f"no protocol given; valid modes: {', '.join(PROTOCOLS)}")
    return [Protocol(n) for n in names]


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    num_valid_queries: int
    num_skipped: int = 0
    protocol: str = ""

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1]) if k <= len(self.cmc) else float("nan")

    def to_record(self) -> dict:
        rec = {"protocol": self.protocol, "map": float(self.map),
               "num_valid_queries": int(self.num_valid_queries), "num_skipped": int(self.num_skipped)}
        for k in (1, 5, 10):
            if k <= len(self.cmc):
                rec[f"rank{k}"] = float(self.cmc[k - 1])
        rec["cmc"] = [float(v) for v in self.cmc]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvalResult":
        return cls(np.asarray(rec["cmc"], dtype=np.float64), float(rec["map"]),
                   int(rec["num_valid_queries"]), int(rec.get("num_skipped", 0)), rec.get("protocol", ""))


def distance_matrix(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Cosine distance 1 - <q, g> between L2-normalised rows."""
    Q = np.asarray(Q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ContractError(f"distance_matrix shape mismatch: {Q.shape} vs {G.shape}")
    for name, M in (("query", Q), ("gallery", G)):
        norms = np.linalg.norm(M, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-3:
            raise ContractError(f"{name} rows must be L2-normalised (max |norm-1| = {np.max(np.abs(norms - 1.0)):.3g})")
    return 1.0 - Q @ G.T


def validity_masks(q: Meta, g: Meta, protocol: Protocol | str) -> Tuple[np.ndarray, np.ndarray]:
    """(junk, positive) boolean matrices of shape [num_query, num_gallery]."""
    mode = protocol.mode if isinstance(protocol, Protocol) else Protocol(protocol).mode
    same_pid = q.pids[:, None] == g.pids[None, :]
    same_cam = q.cams[:, None] == g.cams[None, :]
    same_clo = q.clothes[:, None] == g.clothes[None, :]
    junk = same_pid & same_cam
    if mode == "same_clothes":
        junk = junk | (same_pid & ~same_clo)
        pos = same_pid & same_clo
    elif mode == "cloth_changing":
        junk = junk | (same_pid & same_clo)
        pos = same_pid & ~same_clo
    else:
        pos = same_pid
    return junk, pos & ~junk


def cmc_map(dist_row, junk, positives, k_max: int) -> Tuple[Optional[np.ndarray], float]:
    """Per-query CMC hit vector and AP; ``(None, 0.0)`` when the query has no valid positive."""
    hits, ap, valid = _kernels.rank_metrics(
        np.asarray(dist_row, dtype=np.float64)[None, :],
        np.asarray(junk, dtype=np.bool_)[None, :],
        np.asarray(positives, dtype=np.bool_)[None, :],
        int(k_max),
    )
    if not valid[0]:
        return None, 0.0
    return hits[0], float(ap[0])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SCI_THREADS", "1")))
    except ValueError:
        return 1


def rank_all(dist: np.ndarray, junk: np.ndarray, pos: np.ndarray, k_max: int, threads: Optional[int] = None):
    """Per-query metrics, optionally split across ``threads`` workers (results identical to serial)."""
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    junk = np.ascontiguousarray(junk, dtype=np.bool_)
    pos = np.ascontiguousarray(pos, dtype=np.bool_)
    threads = threads or _threads()
    nq = dist.shape[0]
    if threads <= 1 or nq < 2 * threads:
        return _kernels.rank_metrics(dist, junk, pos, int(k_max))
    bounds = np.linspace(0, nq, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda ab: _kernels.rank_metrics(dist[ab[0]:ab[1]], junk[ab[0]:ab[1]], pos[ab[0]:ab[1]], int(k_max)),
            zip(bounds[:-1], bounds[1:]),
        ))
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def evaluate(
    q_emb: np.ndarray,
    g_emb: np.ndarray,
    q_meta: Meta,
    g_meta: Meta,
    protocol: Protocol | str,
    k_max: int = 10,
    threads: Optional[int] = None,
) -> EvalResult:
    protocol = protocol if isinstance(protocol, Protocol) else Protocol(protocol)
    if k_max < 1:
        raise ContractError("k_max must be >= 1")
    dist = distance_matrix(q_emb, g_emb)
    junk, pos = validity_masks(q_meta, g_meta, protocol)
    hits, ap, valid = rank_all(dist, junk, pos, k_max, threads)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EvaluationError(f"no query has a valid positive under protocol {protocol.mode!r}")
    return EvalResult(
        cmc=hits[valid].mean(axis=0),
        map=float(ap[valid].mean()),
        num_valid_queries=n_valid,
        num_skipped=int(len(valid) - n_valid),
        protocol=protocol.mode,
    )
