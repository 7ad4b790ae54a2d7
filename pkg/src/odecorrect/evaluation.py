"""Trajectory metrics, evaluation protocols and runtime benchmarking."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import Corpus, CorpusRecord, generate_corpus
from .integrators import Grid, IntegrationConfig, integrate
from .model import CorrectionMode, CorrectorTransformer, correct_trajectory, model_corrector, predict_corrections
from .systems import get_system
from .tokenizer import Normalizer

log = logging.getLogger(__name__)


def _diff_norms(pred, ref) -> np.ndarray:
    pred = [np.asarray(p, dtype=float) for p in pred]
    ref = [np.asarray(r, dtype=float) for r in ref]
    if len(pred) != len(ref) or not pred:
        raise ValueError(f"need equal, non-zero trajectory counts (got {len(pred)} and {len(ref)})")
    for p, r in zip(pred, ref):
        if p.shape != r.shape:
            raise ValueError(f"grid mismatch: {p.shape} vs {r.shape}")
    return np.array([np.sqrt(np.sum((p - r) ** 2)) for p, r in zip(pred, ref)])


def mae(pred, ref) -> float:
    """Mean over trajectories of the L2 norm of the whole-trajectory difference."""
    return float(np.mean(_diff_norms(pred, ref)))


def rmse(pred, ref) -> float:
    """Square root of the mean of the same per-trajectory L2 norms."""
    return float(np.sqrt(np.mean(_diff_norms(pred, ref))))


def rmse_componentwise(pred, ref) -> float:
    """Conventional RMSE over every node and component."""
    sq = np.concatenate([((np.asarray(p) - np.asarray(r)) ** 2).ravel() for p, r in zip(pred, ref)])
    return float(np.sqrt(np.mean(sq)))


@dataclass
class MetricRow:
    system: str
    method: str
    mae: float
    rmse: float
    rmse_componentwise: float
    n: int
    d: int
    stride: int
    mode: str
    regime: str = ""


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        if row.n < 1 or row.mae < 0 or row.rmse < 0:
            raise ValueError(f"invalid metric row {row}")
        self.rows.append(row)

    def get(self, method: str, regime: str | None = None) -> MetricRow:
        for r in self.rows:
            if r.method == method and (regime is None or r.regime == regime):
                return r
        raise KeyError(method)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(MetricRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))
        return path


# --- evaluation over a corpus ---------------------------------------------

Corrector = Callable[[list[CorpusRecord], list[CorpusRecord]], list[np.ndarray]]
"""``corrector(demos, queries) -> predicted label sequences`` for the queries."""


def fine_reference(rec: CorpusRecord) -> np.ndarray:
    """Fine states at every coarse node, node 0 included."""
    return np.concatenate([rec.coarse[:1], rec.fine_at_nodes()])


def transformer_corrector(model: CorrectorTransformer, normalizer: Normalizer) -> Corrector:
    def corr(demos, queries):
        return predict_corrections(model, normalizer, [r.demo() for r in demos], [q.trajectory() for q in queries])
    return corr


def oracle_corrector(demos, queries):
    return [q.errors for q in queries]


def zero_corrector(demos, queries):
    return [np.zeros_like(q.errors) for q in queries]


@dataclass
class EvalResult:
    corrected: list[np.ndarray]
    reference: list[np.ndarray]
    coarse: list[np.ndarray]
    records: list[CorpusRecord]


def evaluate_corrections(corpus: Corpus, corrector: Corrector, d: int = 5, mode="teacher",
                         rollout_corrector=None, max_queries: int | None = None) -> EvalResult:
    """Per variation, the first ``d`` trajectories are demos and the rest are queries.

    In rollout mode ``rollout_corrector(demos, query) -> callable`` supplies a
    live per-step corrector; otherwise the predicted label sequence is replayed.
    """
    mode = CorrectionMode(mode)
    out = EvalResult([], [], [], [])
    for v, recs in sorted(corpus.variations().items()):
        recs = sorted(recs, key=lambda r: r.index)
        if len(recs) <= d:
            continue
        demos, queries = recs[:d], recs[d:]
        if max_queries is not None:
            queries = queries[:max_queries]
        if mode is CorrectionMode.ROLLOUT and rollout_corrector is not None:
            preds = [None] * len(queries)
        else:
            preds = corrector(demos, queries)
        for q, e in zip(queries, preds):
            live = rollout_corrector(demos, q) if (mode is CorrectionMode.ROLLOUT and rollout_corrector) else None
            tr = correct_trajectory(q.trajectory(), e, mode, corrector=live)
            out.corrected.append(tr.states)
            out.reference.append(fine_reference(q))
            out.coarse.append(q.coarse)
            out.records.append(q)
    if not out.records:
        raise ValueError(f"no variation has more than d={d} trajectories")
    return out


def report_rows(res: EvalResult, system: str, method: str, d: int, stride: int, mode: str,
                regime: str = "") -> MetricRow:
    return MetricRow(system, method, mae(res.corrected, res.reference), rmse(res.corrected, res.reference),
                     rmse_componentwise(res.corrected, res.reference), len(res.records), d, stride, str(mode),
                     regime)


def evaluate_methods(corpus: Corpus, correctors: dict[str, Corrector], d: int = 5, mode="teacher",
                     regime: str = "", rollout_correctors: dict | None = None) -> MetricReport:
    """One row per method plus a ``coarse`` row for the uncorrected solver."""
    rep = MetricReport()
    stride = corpus.config.stride if corpus.config else corpus.records[0].stride
    mode_s = CorrectionMode(mode).value
    base = evaluate_corrections(corpus, zero_corrector, d, "teacher")
    rep.add(MetricRow(corpus.system, "coarse", mae(base.coarse, base.reference), rmse(base.coarse, base.reference),
                      rmse_componentwise(base.coarse, base.reference), len(base.records), d, stride, "none",
                      regime))
    for name, corr in correctors.items():
        live = (rollout_correctors or {}).get(name)
        res = evaluate_corrections(corpus, corr, d, mode, rollout_corrector=live)
        rep.add(report_rows(res, corpus.system, name, d, stride, mode_s, regime))
    return rep


def regime_sweep(system, regimes: Sequence[str], correctors: dict[str, Corrector], config: IntegrationConfig,
                 n_variations: int = 2, n_trajectories: int = 10, d: int = 5, seed: int = 0) -> MetricReport:
    """Evaluate on fresh corpora drawn from each named behaviour regime."""
    rep = MetricReport()
    sys_ = get_system(system)
    for name in regimes:
        corpus = generate_corpus(sys_, None, n_variations, n_trajectories, config, seed, regime=name)
        if corpus.excluded:
            log.warning("%s/%s: %d trajectories diverged", sys_.name, name, len(corpus.excluded))
        try:
            sub = evaluate_methods(corpus, correctors, d, regime=name)
        except ValueError as exc:
            log.warning("%s/%s: %s", sys_.name, name, exc)
            continue
        rep.rows.extend(sub.rows)
    return rep


def stride_config(config: IntegrationConfig, alpha: float) -> IntegrationConfig:
    k = config.stride * alpha
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise ValueError(f"stride {config.stride} * {alpha} is not a positive integer")
    k = int(round(k))
    return IntegrationConfig(config.dt, config.n_coarse_steps * k, k, config.scheme)


def stride_transfer(system, alpha: float, correctors: dict[str, Corrector], config: IntegrationConfig,
                    ranges="test", n_variations: int = 2, n_trajectories: int = 10, d: int = 5,
                    seed: int = 0) -> MetricReport:
    """Rebuild a test corpus at stride ``alpha * k`` (same node count) and evaluate unchanged models."""
    cfg = stride_config(config, alpha)
    corpus = generate_corpus(system, ranges, n_variations, n_trajectories, cfg, seed)
    return evaluate_methods(corpus, correctors, d)


# --- runtime ----------------------------------------------------------------

@dataclass
class RuntimeReport:
    system: str
    n_eqs: int
    stride: int
    fine: float
    coarse: float
    corrected: float
    repeats: int

    @property
    def normalized(self) -> dict[str, float]:
        return {"fine": self.fine / self.coarse, "coarse": 1.0, "corrected": self.corrected / self.coarse}

    @property
    def speedup(self) -> float:
        return self.fine / self.corrected

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        norm = self.normalized
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["system", "n_eqs", "stride", "method", "seconds", "normalized", "repeats"])
            for key, label in (("fine", "rk4_fine"), ("coarse", "rk4_coarse"), ("corrected", "coarse_plus_model")):
                w.writerow([self.system, self.n_eqs, self.stride, label, getattr(self, key), norm[key], self.repeats])
        return path


def runtime_bench(system, params, ics: np.ndarray, config: IntegrationConfig,
                  correct: Callable[[np.ndarray], np.ndarray], repeats: int = 5) -> RuntimeReport:
    """Median wall time of fine RK4, coarse RK4 and coarse + ``correct``.

    ``correct(coarse_states)`` receives the batched coarse states
    ``(n_eqs, n + 1, dim)`` and returns corrected states; work inside it counts
    toward the corrected time.  All three use the same vectorised stepping.
    """
    sys_ = get_system(system)
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        fine_t, coarse_t, corr_t = [], [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            integrate(sys_, params, ics, config.dt, 1, config.n_fine_steps, config.scheme)
            fine_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            integrate(sys_, params, ics, config.dt, config.stride, config.n_coarse_steps, config.scheme)
            coarse_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            states, _ = integrate(sys_, params, ics, config.dt, config.stride, config.n_coarse_steps, config.scheme)
            correct(states)
            corr_t.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(prev)
    return RuntimeReport(sys_.name, len(ics), config.stride, statistics.median(fine_t),
                         statistics.median(coarse_t), statistics.median(corr_t), repeats)


# --- plots ------------------------------------------------------------------

def plot_trajectories(path, times: np.ndarray, fine: np.ndarray, coarse: np.ndarray, corrected: np.ndarray,
                      title: str = "", labels=("fine", "coarse", "corrected")) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = fine.shape[1]
    fig, axes = plt.subplots(dim, 1, figsize=(6, 2.2 * dim), sharex=True, squeeze=False)
    for i in range(dim):
        ax = axes[i, 0]
        ax.plot(times, fine[:, i], "k-", lw=1.5, label=labels[0])
        ax.plot(times, coarse[:, i], "o", ms=3, mfc="none", label=labels[1])
        ax.plot(times, corrected[:, i], "x", ms=3, label=labels[2])
        ax.set_ylabel(f"u[{i}]")
    axes[0, 0].legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("t")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
