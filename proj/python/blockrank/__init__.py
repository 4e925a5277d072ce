"""Blockwise-attention in-context ranking: Python front end to the C++ core."""

from __future__ import annotations

import json
from typing import Any, Iterable, Sequence

import numpy as np

from . import _core
from ._core import BlockRankError, ConfigError

__all__ = [
    "BlockRankError",
    "ConfigError",
    "Ranker",
    "analytic_scored_pairs",
    "compute_metrics",
    "generate_synthetic",
    "id_digit_entropy",
    "infonce_aux_loss",
    "ntp_loss",
    "run_cli",
]


def run_cli(args: Sequence[str]) -> tuple[int, str, str]:
    """Runs a command-line invocation in-process; returns (exit code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])


def generate_synthetic(n: int, **task: Any) -> list[dict]:
    """Synthetic retrieval examples. Keyword arguments override task settings (n_docs, doc_len, ...)."""
    return json.loads(_core.generate_synthetic(json.dumps(task), n))


def compute_metrics(
    rankings: Iterable[Sequence[str]], positives: Iterable[Sequence[str]], per_query: bool = False
) -> dict:
    return json.loads(_core.compute_metrics([list(r) for r in rankings], [list(p) for p in positives], per_query))


def analytic_scored_pairs(n_docs: int, chunk_len: int, mode: str = "blockwise") -> int:
    return _core.analytic_scored_pairs(n_docs, chunk_len, mode)


def infonce_aux_loss(
    scores: Sequence[float], positive: int, tau: float = 0.05, excluded: Sequence[int] = ()
) -> float:
    return _core.infonce_aux_loss(list(scores), positive, tau, list(excluded))


def ntp_loss(logits: np.ndarray, rows: Sequence[int], targets: Sequence[int]) -> float:
    return _core.ntp_loss(np.asarray(logits, dtype=np.float64), list(rows), list(targets))


def id_digit_entropy(n_lists: int = 5000, seed: int = 0) -> dict:
    return json.loads(_core.id_digit_entropy(n_lists, seed))


class Ranker:
    """Loads a training run directory and ranks candidate lists."""

    def __init__(self, run_dir: str):
        self._impl = _core.Ranker(str(run_dir))

    @property
    def n_layers(self) -> int:
        return self._impl.n_layers

    @property
    def config(self) -> dict:
        return json.loads(self._impl.config())

    def rank(
        self, example: dict, method: str = "attention", l_star: int | None = None, k: int = 0, beam: int = 10
    ) -> dict:
        return json.loads(self._impl.rank(json.dumps(example), method, l_star, k, beam))

    def layerwise(self, examples: Sequence[dict], seed: int = 0) -> dict:
        return json.loads(self._impl.layerwise(json.dumps(list(examples)), seed))
