"""Multi-seed ablation runs on the synthetic benchmark, with head/tail breakdowns."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import chronological_split, filter_corpus, item_counts
from .synth import SyntheticSpec, generate_synthetic
from .training import TrainConfig, evaluate, stratified_evaluate, train

VARIANTS = {
    "MACL": {},
    "MACL-adp": {"no_adaptive": True},
    "MACL-item": {"no_item_cl": True},
    "MACL-sess": {"no_sess_cl": True},
    "MACL_com": {"legacy_aug": True},
}

# desk-scale settings: smaller width and negatives than the full defaults, same objective
BENCH_CONFIG = TrainConfig(d=32, M=20, N=64, epochs=10, max_len=10, lr=0.003, keep_unpopular=True)


@dataclass
class RunResult:
    variant: str
    seed: int
    prec20: float
    mrr20: float
    head_prec20: float
    tail_prec20: float
    best_epoch: int
    seconds: float

    @property
    def degradation(self) -> float:
        """Relative drop from head to tail Prec@20."""
        return (self.head_prec20 - self.tail_prec20) / self.head_prec20 if self.head_prec20 > 0 else float("nan")


@dataclass
class SuiteResult:
    runs: list[RunResult] = field(default_factory=list)

    def values(self, variant: str, attr: str = "prec20") -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.runs if r.variant == variant])

    def mean(self, variant: str, attr: str = "prec20") -> float:
        return float(self.values(variant, attr).mean())

    def std(self, variant: str, attr: str = "prec20") -> float:
        return float(self.values(variant, attr).std(ddof=1)) if len(self.values(variant, attr)) > 1 else 0.0


def head_boundary(train_sessions, n_items: int, head_fraction: float = 0.2) -> float:
    """Training count separating the most popular ``head_fraction`` of items from the rest."""
    counts = item_counts(train_sessions)
    freq = np.sort(np.array([counts.get(i, 0) for i in range(n_items)]))
    return float(freq[int(np.floor((1.0 - head_fraction) * n_items)) - 1])


def run_suite(
    seeds=(0, 1, 2, 3, 4),
    variants=tuple(VARIANTS),
    config: TrainConfig = BENCH_CONFIG,
    spec: SyntheticSpec = SyntheticSpec(),
    log=None,
) -> SuiteResult:
    out = SuiteResult()
    for seed in seeds:
        data = generate_synthetic(replace(spec, seed=seed))
        sessions, catalog = filter_corpus(data.sessions, data.catalog, config.min_item_count, config.keep_unpopular)
        splits = chronological_split(sessions)
        popularity = dict(item_counts(splits.train))
        bound = head_boundary(splits.train, len(catalog))
        for name in variants:
            cfg = replace(config, seed=seed, **VARIANTS[name])
            start = time.perf_counter()
            result = train(cfg, splits, catalog)
            rep = evaluate(result.model, splits.test, (20,))
            (tail, tail_rep), (head, head_rep) = stratified_evaluate(result.model, splits.test, "item_popularity", [bound], (20,), popularity)
            run = RunResult(
                name,
                seed,
                rep.precision[20],
                rep.mrr[20],
                head_rep.precision[20] if head_rep else float("nan"),
                tail_rep.precision[20] if tail_rep else float("nan"),
                result.best_epoch,
                time.perf_counter() - start,
            )
            out.runs.append(run)
            if log:
                log(f"{name:<10} seed {seed}  Prec@20 {run.prec20:.4f}  head {run.head_prec20:.4f}  tail {run.tail_prec20:.4f}  {run.seconds:.0f}s")
    return out
