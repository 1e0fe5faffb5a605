"""Re-simulation error, best-of-T curves, inference timing and the two ablations."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .datasets import Dataset
from .inverse import (BackwardModel, ForwardModel, MixtureManifoldModel, NASettings, ProposalSet,
                      mmn_infer_batch, mmn_propose, na_infer_batch, train_manifold,
                      train_tandem_real)
from .nn import NetworkSpec
from .simulators import ConfigurationError, ProblemSpec, SimulatorHandle, simulate
from .training import TrainSettings

REPORT_HEADER = ["query_id", "t", "manifold_or_restart", "surrogate_err", "true_resim_err"]


def resim_error(sim: SimulatorHandle, x_hat, y) -> np.ndarray | float:
    """Mean over output dims of (f(x_hat) - y)^2 using the true simulator.

    A single proposal gives a float; a batch of rows gives one error per row.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = x_hat.ndim == 1
    d = simulate(sim, np.atleast_2d(x_hat)) - np.atleast_2d(y)
    r = np.mean(d * d, axis=1)
    return float(r[0]) if single else r


def _f(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class EvalReport:
    problem: str
    model_id: str
    t_max: int
    proposals: List[np.ndarray]
    sources: List[np.ndarray]
    surrogate_errors: List[np.ndarray]
    true_errors: List[np.ndarray]
    timing: Optional[dict] = None
    config: dict = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return len(self.true_errors)

    def mean_resim(self, T: int) -> float:
        """Mean over queries of the best true error among the first T proposals.

        Queries with fewer than T proposals use all of them.
        """
        if T < 1:
            raise ValueError("T must be at least 1")
        mins = [float(np.min(r[:T])) for r in self.true_errors]
        return math.fsum(mins) / len(mins)

    def curve(self) -> List[tuple]:
        return [(T, self.mean_resim(T)) for T in range(1, self.t_max + 1)]

    def report_csv(self) -> str:
        lines = [",".join(REPORT_HEADER)]
        for q, (src, se, te) in enumerate(zip(self.sources, self.surrogate_errors, self.true_errors)):
            for t in range(len(te)):
                lines.append(f"{q},{t + 1},{int(src[t])},{_f(se[t])},{_f(te[t])}")
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        return "T,mean_resim\n" + "".join(f"{T},{_f(v)}\n" for T, v in self.curve())

    def proposals_csv(self) -> str:
        d = self.proposals[0].shape[1] if self.proposals and len(self.proposals[0]) else 0
        lines = [",".join(["query_id", "t"] + [f"x_{i}" for i in range(d)])]
        for q, xs in enumerate(self.proposals):
            for t, x in enumerate(xs):
                lines.append(",".join([str(q), str(t + 1)] + [_f(v) for v in x]))
        return "\n".join(lines) + "\n"

    def save(self, directory, prefix: str = "") -> Dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": d / f"{prefix}report.csv",
            "summary": d / f"{prefix}summary.csv",
            "proposals": d / f"{prefix}proposals.csv",
        }
        paths["report"].write_text(self.report_csv())
        paths["summary"].write_text(self.summary_csv())
        paths["proposals"].write_text(self.proposals_csv())
        if self.timing is not None:
            paths["timing"] = d / f"{prefix}timing.json"
            paths["timing"].write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")
        return paths


def read_report_rows(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _queries(Y) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if Y.size == 0:
        raise ConfigurationError("empty test split")
    return Y


def evaluate_proposals(sets: Sequence[ProposalSet], Y, sim: SimulatorHandle, t_max: int,
                       problem: str = "", model_id: str = "", config: dict | None = None) -> EvalReport:
    """Score the first ``t_max`` proposals of every query with the true simulator."""
    if t_max < 1:
        raise ConfigurationError("t_max must be at least 1")
    Y = _queries(Y)
    kept = [(ps.proposals[:t_max], ps.sources[:t_max], ps.surrogate_errors[:t_max]) for ps in sets]
    counts = [len(k[0]) for k in kept]
    if min(counts) == 0:
        raise ConfigurationError("a query has no surviving proposals")
    X = np.concatenate([k[0] for k in kept])
    targets = np.repeat(Y, counts, axis=0)
    errs = resim_error(sim, X, targets)
    splits = np.cumsum(counts)[:-1]
    true = np.split(errs, splits)
    return EvalReport(problem, model_id, t_max, [k[0] for k in kept], [k[1] for k in kept],
                      [k[2] for k in kept], true, config=dict(config or {}))


def evaluate_mmn(model: MixtureManifoldModel, Y, sim: SimulatorHandle, t_max: int = 1,
                 model_id: str = "mmn") -> EvalReport:
    """Proposals beyond K are not invented: best-of-T for T > K equals best-of-K."""
    Y = _queries(Y)
    sets = mmn_infer_batch(model, Y)
    return evaluate_proposals(sets, Y, sim, t_max, model.problem.name, model_id,
                              {"K": model.K, **model.meta})


def evaluate_na(fm: ForwardModel, problem: ProblemSpec, Y, sim: SimulatorHandle, t_max: int = 1,
                settings: NASettings | None = None, model_id: str = "na") -> EvalReport:
    settings = settings or NASettings()
    Y = _queries(Y)
    sets = na_infer_batch(fm, problem, Y, settings)
    return evaluate_proposals(sets, Y, sim, t_max, problem.name, model_id, vars(settings))


def evaluate(model, Y, sim: SimulatorHandle, t_max: int = 1, na: NASettings | None = None,
             problem: ProblemSpec | None = None) -> EvalReport:
    if isinstance(model, MixtureManifoldModel):
        return evaluate_mmn(model, Y, sim, t_max)
    if isinstance(model, ForwardModel):
        if problem is None:
            raise ConfigurationError("neural-adjoint evaluation needs the problem")
        return evaluate_na(model, problem, Y, sim, t_max, na)
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def time_inference(infer: Callable[[np.ndarray], object], Y, sequential: bool = True,
                   warmup: int = 8) -> dict:
    """Wall-clock seconds to answer every query in ``Y``, batched and one at a time.

    A short warm-up call runs first and is not timed.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    infer(Y[:max(1, min(warmup, len(Y)))])
    t0 = time.perf_counter()
    infer(Y)
    batched = time.perf_counter() - t0
    seq = None
    if sequential:
        t0 = time.perf_counter()
        for q in range(len(Y)):
            infer(Y[q:q + 1])
        seq = time.perf_counter() - t0
    return {"batched_s": batched, "sequential_s": seq, "n_queries": int(len(Y))}


def time_mmn(model: MixtureManifoldModel, Y, sequential: bool = True) -> dict:
    return time_inference(lambda q: mmn_infer_batch(model, q), Y, sequential)


def time_na(fm: ForwardModel, problem: ProblemSpec, Y, settings: NASettings | None = None,
            sequential: bool = True) -> dict:
    settings = settings or NASettings()
    return time_inference(lambda q: na_infer_batch(fm, problem, q, settings), Y, sequential)


# -- ablations ----------------------------------------------------------------

@dataclass
class KSweep:
    rows: List[dict]

    def to_csv(self) -> str:
        out = "K,mean_resim,normalized,mean_selected_surrogate\n"
        for r in self.rows:
            out += (f"{r['K']},{_f(r['mean_resim'])},{_f(r['normalized'])},"
                    f"{_f(r['mean_selected_surrogate'])}\n")
        return out


def ablate_K(model: MixtureManifoldModel, Y, sim: SimulatorHandle, max_k: int | None = None) -> KSweep:
    """Best-of-1 true error of the first-k-manifold prefixes, k = 1..max_k.

    Prefixes share manifolds, so only the number of candidates changes.
    """
    max_k = max_k or model.K
    if max_k > model.K:
        raise ConfigurationError(f"model has {model.K} manifolds, sweep asks for {max_k}")
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    xs, err, _ = mmn_propose(model.prefix(max_k), Y)
    Q = len(Y)
    true = np.stack([resim_error(sim, xs[:, k], Y) for k in range(max_k)], axis=1)
    rows = []
    for k in range(1, max_k + 1):
        pick = np.argmin(err[:, :k], axis=1)
        r = math.fsum(true[np.arange(Q), pick]) / Q
        s = math.fsum(err[np.arange(Q), pick]) / Q
        rows.append({"K": k, "mean_resim": r, "mean_selected_surrogate": s})
    base = rows[0]["mean_resim"]
    for r in rows:
        r["normalized"] = r["mean_resim"] / base
    return KSweep(rows)


@dataclass
class AugmentationSweep:
    reference_resim: float
    n_real: int
    rows: List[dict]

    @property
    def crossover(self) -> Optional[float]:
        """Smallest sampled ratio whose relative error drops below 1."""
        for r in self.rows:
            if r["relative"] < 1.0:
                return r["ratio"]
        return None

    def to_csv(self) -> str:
        out = "source,ratio,n_prime,mean_resim,relative_err\n"
        out += f"real,1,{self.n_real},{_f(self.reference_resim)},{_f(1.0)}\n"
        for r in self.rows:
            out += (f"generated,{_f(r['ratio'])},{r['n_prime']},{_f(r['mean_resim'])},"
                    f"{_f(r['relative'])}\n")
        return out

    def summary(self) -> dict:
        return {"n_real": self.n_real, "reference_resim": self.reference_resim,
                "crossover_ratio": self.crossover}


def ablate_augmentation(fm: ForwardModel, ds: Dataset, problem: ProblemSpec, ratios: Sequence[float],
                        spec: NetworkSpec, gamma: float, settings: TrainSettings, seed: int,
                        Y, sim: SimulatorHandle,
                        reference: MixtureManifoldModel | None = None,
                        reuse: Dict[int, BackwardModel] | None = None) -> AugmentationSweep:
    """Single-manifold best-of-1 error vs. amount of forward-generated data,
    relative to a single manifold trained on the real data.

    ``reuse`` maps n_prime to an already trained manifold-0 model with the same
    settings and seed, so the sweep can share work with an MMN run.
    """
    n_real = int(np.sum(ds.split == "train"))
    if reference is None:
        reference = train_tandem_real(fm, ds, problem, spec, gamma, settings, seed)
    ref = evaluate_mmn(reference, Y, sim, 1).mean_resim(1)
    rows = []
    for ratio in ratios:
        n_prime = int(round(ratio * n_real))
        if n_prime < 2:
            raise ConfigurationError(f"ratio {ratio} gives too few generated points")
        bm = (reuse or {}).get(n_prime)
        if bm is None:
            bm = train_manifold(fm, problem, 0, n_prime, spec, gamma, settings, seed)
        model = MixtureManifoldModel(fm, [bm], problem)
        r = evaluate_mmn(model, Y, sim, 1).mean_resim(1)
        rows.append({"ratio": float(ratio), "n_prime": n_prime, "mean_resim": r, "relative": r / ref})
    return AugmentationSweep(ref, n_real, rows)
