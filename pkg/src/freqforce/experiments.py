"""Ablation matrices: named arm sets run across seeds, summarized by a sign test."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, dumps, loads
from .training import run_training

logger = logging.getLogger(__name__)

# arm name -> per-section overrides applied on top of the base config
ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    "ordered-vs-sync": [
        ("ordered", {"ablation": {"synchronous_clocks": False}}),
        ("synchronous", {"ablation": {"synchronous_clocks": True}}),
    ],
    "random-aux": [
        ("true-latent", {"ablation": {"random_aux_latent": False}}),
        ("random-latent", {"ablation": {"random_aux_latent": True}}),
    ],
    "basis": [
        ("learned", {"ablation": {"fixed_basis": "learned"}}),
        ("haar", {"ablation": {"fixed_basis": "haar"}}),
        ("laplacian", {"ablation": {"fixed_basis": "laplacian"}}),
    ],
}

SUMMARY_COLUMNS = ("experiment", "arm", "seed", "steps", "eval_pix", "eval_fre", "final_loss_pix")


@dataclass
class ArmResult:
    experiment: str
    arm: str
    seed: int
    steps: int
    eval_pix: float
    eval_fre: float | None
    final_loss_pix: float

    def row(self) -> list:
        return [self.experiment, self.arm, self.seed, self.steps, repr(self.eval_pix),
                "" if self.eval_fre is None else repr(self.eval_fre), repr(self.final_loss_pix)]


def arm_config(base: RunConfig, overrides: dict, seed: int) -> RunConfig:
    sections = {k: dict(v) for k, v in overrides.items()}
    sections.setdefault("train", {})["seed"] = seed
    return base.replace(**sections)


def _run_arm(job) -> ArmResult:
    experiment, arm, seed, cfg_text, out_dir = job
    cfg = loads(cfg_text)
    trainer, rows = run_training(cfg, out_dir)
    ev = trainer.evaluate()
    return ArmResult(experiment, arm, seed, trainer.step_count, ev["pix"], ev.get("fre"), rows[-1]["loss_pix"])


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("FQFC_THREADS", "1") or 1)
    n = requested if requested is not None else cap
    return max(1, min(n, cap))


def run_ablation(name: str, base: RunConfig, seeds, out_dir=None, workers: int | None = None) -> list[ArmResult]:
    if name not in ABLATIONS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {sorted(ABLATIONS)}")
    jobs = []
    for seed in seeds:
        for arm, overrides in ABLATIONS[name]:
            cfg = arm_config(base, overrides, seed)
            sub = None if out_dir is None else str(Path(out_dir) / f"{arm}_seed{seed}")
            jobs.append((name, arm, seed, dumps(cfg), sub))
    n = worker_count(workers)
    if n == 1:
        results = [_run_arm(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_arm, jobs))
    if out_dir is not None:
        write_summary(Path(out_dir) / "summary.csv", results)
    return results


def write_summary(path, results) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            w.writerow(r.row())


def sign_test_pvalue(wins: int, n: int) -> float:
    """One-sided exact binomial p-value of at least ``wins`` successes in ``n`` fair trials."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


@dataclass
class Verdict:
    better: str
    worse: str
    wins: int
    n: int
    p_value: float

    @property
    def majority(self) -> bool:
        return 2 * self.wins > self.n

    def __str__(self) -> str:
        word = "holds" if self.majority else "fails"
        return (f"{self.better} < {self.worse} on held-out pixel loss in {self.wins}/{self.n} seeds "
                f"(sign test p={self.p_value:.3f}); direction {word}")


def compare(results, better: str, worse: str, metric: str = "eval_pix") -> Verdict:
    """Paired-by-seed comparison: how often ``better`` has the lower metric."""
    by = {(r.arm, r.seed): getattr(r, metric) for r in results}
    seeds = sorted({s for a, s in by if a == better} & {s for a, s in by if a == worse})
    wins = sum(by[(better, s)] < by[(worse, s)] for s in seeds)
    return Verdict(better, worse, wins, len(seeds), sign_test_pvalue(wins, len(seeds)))


def verdicts(name: str, results) -> list[Verdict]:
    arms = [a for a, _ in ABLATIONS[name]]
    return [compare(results, arms[0], other) for other in arms[1:]]
