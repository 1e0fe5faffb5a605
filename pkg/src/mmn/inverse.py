"""Forward surrogates, tandem backward models, mixture-of-manifolds inference,
and the neural-adjoint baseline."""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .datasets import Dataset
from .nn import Adam, Network, NetworkSpec, backprop_input, param_gradients
from .simulators import (STREAM_INIT, STREAM_NA, STREAM_PRIOR, STREAM_SHUFFLE, ProblemSpec,
                         get_problem, make_rng, sample_prior)
from .training import TrainRecord, TrainSettings, TrainingError, fit

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.1
AUG_VAL_FRACTION = 0.1


def _freeze(net: Network) -> None:
    for _, arr in net.tensors():
        arr.setflags(write=False)


@dataclass
class ForwardModel:
    net: Network
    record: TrainRecord = field(default_factory=TrainRecord)
    frozen: bool = False

    def freeze(self) -> "ForwardModel":
        self.net.eval()
        _freeze(self.net)
        self.frozen = True
        return self

    def predict(self, X) -> np.ndarray:
        """Surrogate output in float64 (computed by the float32 network)."""
        if self.net.training:
            raise RuntimeError("forward model must be in inference mode")
        out, _ = self.net._forward(np.asarray(X), keep=False)
        return out.astype(np.float64)

    def digest(self) -> str:
        return self.net.digest()


@dataclass
class BackwardModel:
    net: Network
    index: int = 0
    gamma: float = DEFAULT_GAMMA
    seed: Optional[int] = None
    provenance: str = "forward-generated"
    n_prime: Optional[int] = None
    record: TrainRecord = field(default_factory=TrainRecord)

    def predict(self, Y) -> np.ndarray:
        out, _ = self.net._forward(np.asarray(Y), keep=False)
        return out.astype(np.float64)


@dataclass
class MixtureManifoldModel:
    forward: ForwardModel
    backwards: List[BackwardModel]
    problem: ProblemSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.backwards:
            raise ValueError("a mixture needs at least one backward model")

    @property
    def K(self) -> int:
        return len(self.backwards)

    def prefix(self, k: int) -> "MixtureManifoldModel":
        """The mixture made of the first ``k`` manifolds (shares every network)."""
        return MixtureManifoldModel(self.forward, self.backwards[:k], self.problem, dict(self.meta))

    def save(self, directory) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        fwd_hash = self.forward.net.save(d / "forward.ckpt")
        hashes = [bm.net.save(d / f"backward_{k}.ckpt") for k, bm in enumerate(self.backwards)]
        info = {
            **self.meta,
            "problem": self.problem.name,
            "K": self.K,
            "forward_sha256": fwd_hash,
            "backward_sha256": hashes,
            "gamma": [bm.gamma for bm in self.backwards],
            "seeds": [bm.seed for bm in self.backwards],
            "provenance": [bm.provenance for bm in self.backwards],
            "n_prime": [bm.n_prime for bm in self.backwards],
        }
        (d / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return info

    @classmethod
    def load(cls, directory) -> "MixtureManifoldModel":
        d = Path(directory)
        info = json.loads((d / "model.json").read_text())
        fm = ForwardModel(Network.load(d / "forward.ckpt")).freeze()
        backwards = []
        for k in range(info["K"]):
            backwards.append(BackwardModel(
                Network.load(d / f"backward_{k}.ckpt"), k, info["gamma"][k], info["seeds"][k],
                info["provenance"][k], info["n_prime"][k]))
        meta = {key: v for key, v in info.items()
                if key not in ("problem", "K", "forward_sha256", "backward_sha256", "gamma",
                               "seeds", "provenance", "n_prime")}
        return cls(fm, backwards, get_problem(info["problem"]), meta)


@dataclass
class ProposalSet:
    """Candidate inputs for one query, sorted by surrogate error (ascending)."""
    proposals: np.ndarray  # (T, dim_x)
    surrogate_errors: np.ndarray  # (T,)
    sources: np.ndarray  # manifold / restart index of each proposal
    selected: int = 0

    def __len__(self):
        return len(self.surrogate_errors)

    @property
    def best(self) -> np.ndarray:
        return self.proposals[self.selected]


def surrogate_error(fm: ForwardModel, X, Y) -> np.ndarray:
    """Row-wise mean squared error between the surrogate at ``X`` and targets ``Y``."""
    d = fm.predict(X) - np.asarray(Y, dtype=np.float64)
    return np.mean(d * d, axis=-1)


# -- forward model -----------------------------------------------------------

def train_forward(ds: Dataset, spec: NetworkSpec, settings: TrainSettings, seed: int = 0) -> ForwardModel:
    """Fit the surrogate on the real train split; best-validation snapshot, frozen."""
    Xtr, Ytr = ds.part("train")
    Xv, Yv = ds.part("val")
    if len(Xtr) == 0 or len(Xv) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    net = Network.initialize(spec, make_rng(seed, STREAM_INIT))

    def step(idx):
        return param_gradients(net, Xtr[idx], Ytr[idx])

    def validate():
        d = net._forward(Xv, keep=False)[0] - Yv
        return float(np.mean(d * d))

    record = fit(net, step, len(Xtr), validate, settings, make_rng(seed, STREAM_SHUFFLE),
                 phase="forward")
    return ForwardModel(net, record).freeze()


# -- boundary loss ------------------------------------------------------------

def boundary_loss(x, bounds):
    """Hinge penalty for leaving the box ``bounds``; returns (value, subgradient).

    ``x`` may be a vector or a batch of rows; the value is summed over
    dimensions (one value per row for batches).
    """
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(bounds, dtype=np.float64)
    lo, hi = b[:, 0], b[:, 1]
    above = x > hi
    below = x < lo
    per_dim = np.where(x >= hi, x - hi, np.where(x <= lo, lo - x, 0.0))
    grad = above.astype(np.float64) - below.astype(np.float64)
    return per_dim.sum(axis=-1), grad


def boundary_loss_relu(x, bounds) -> np.ndarray:
    """Same penalty written as ReLU(|x - centre| - range / 2), summed over dims."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(bounds, dtype=np.float64)
    centre = (b[:, 0] + b[:, 1]) / 2
    half_range = (b[:, 1] - b[:, 0]) / 2
    return np.maximum(np.abs(x - centre) - half_range, 0.0).sum(axis=-1)


# -- augmentation -------------------------------------------------------------

def generate_augmented(fm: ForwardModel, problem: ProblemSpec, n_prime: int, seed: int,
                       val_fraction: float = AUG_VAL_FRACTION) -> Dataset:
    """Pseudo-pairs (x~, f^(x~)) with x~ from the problem prior.

    The last ``val_fraction`` of the rows form the validation split.
    """
    if not fm.frozen:
        raise ValueError("forward model must be frozen before generating data")
    X = sample_prior(problem, n_prime, make_rng(seed, STREAM_PRIOR))
    Y = fm.predict(X)
    n_val = int(round(n_prime * val_fraction)) if n_prime > 1 else 0
    n_val = min(max(n_val, 1 if n_prime > 1 else 0), n_prime - 1)
    split = np.array(["train"] * (n_prime - n_val) + ["val"] * n_val, dtype=object)
    return Dataset(problem.name, X, Y, split, "forward-generated", seed,
                   {"n_prime": n_prime, "forward_sha256": fm.digest()})


# -- backward (tandem) training -----------------------------------------------

def tandem_loss(g: Network, fm: ForwardModel, Y: np.ndarray, bounds, gamma: float,
                with_grads: bool = True):
    """Mean ||f^(g(y)) - y||^2 over batch and output dims, plus gamma times the
    batch-mean boundary penalty.  Gradients reach only ``g``'s parameters."""
    xhat, cache = g._forward(Y, keep=with_grads)
    fwd = fm.net

    def dloss(out):
        return (2.0 / out.size) * (out - Y.astype(out.dtype, copy=False))

    if with_grads:
        out, dx = backprop_input(fwd, xhat, dloss)
    else:
        out = fwd._forward(xhat, keep=False)[0]
    diff = out.astype(np.float64) - Y
    fit_loss = float(np.mean(diff * diff))
    bnd, bgrad = boundary_loss(xhat, bounds)
    total = fit_loss + gamma * float(np.mean(bnd))
    if not with_grads:
        return total, None
    dx = dx + (gamma / len(Y)) * bgrad.astype(dx.dtype)
    grads, _ = g._backward(cache, dx)
    return total, grads


def train_backward(fm: ForwardModel, y_train, y_val, spec: NetworkSpec, bounds,
                   gamma: float = DEFAULT_GAMMA, settings: TrainSettings = None, seed: int = 0,
                   index: int = 0, provenance: str = "forward-generated",
                   n_prime: Optional[int] = None) -> BackwardModel:
    """Train one backward model through the frozen surrogate (x labels are never used)."""
    if not fm.frozen:
        raise ValueError("forward model must be frozen before backward training")
    settings = settings or TrainSettings()
    Ytr = np.asarray(y_train, dtype=np.float64)
    Yv = np.asarray(y_val, dtype=np.float64)
    if len(Ytr) == 0 or len(Yv) == 0:
        raise ValueError("backward training needs non-empty train and val targets")
    g = Network.initialize(spec, make_rng(seed, STREAM_INIT))

    def step(idx):
        return tandem_loss(g, fm, Ytr[idx], bounds, gamma)

    def validate():
        return tandem_loss(g, fm, Yv, bounds, gamma, with_grads=False)[0]

    record = fit(g, step, len(Ytr), validate, settings, make_rng(seed, STREAM_SHUFFLE),
                 phase=f"backward[{index}]")
    return BackwardModel(g, index, gamma, seed, provenance, n_prime, record)


def manifold_seed(seed: int, k: int) -> int:
    return int(seed) ^ int(k)


def train_manifold(fm: ForwardModel, problem: ProblemSpec, k: int, n_prime: int,
                   spec: NetworkSpec, gamma: float, settings: TrainSettings, seed: int,
                   augmented: Optional[Dataset] = None) -> BackwardModel:
    s = manifold_seed(seed, k)
    aug = augmented if augmented is not None else generate_augmented(fm, problem, n_prime, s)
    _, ytr = aug.part("train")
    _, yv = aug.part("val")
    return train_backward(fm, ytr, yv, spec, problem.bounds, gamma, settings, s,
                          index=k, provenance="forward-generated", n_prime=n_prime)


def train_mmn(fm: ForwardModel, problem: ProblemSpec, K: int, n_prime: int, spec: NetworkSpec,
              gamma: float = DEFAULT_GAMMA, settings: TrainSettings = None, seed: int = 0,
              workers: int = 1, share_augmented: bool = False) -> MixtureManifoldModel:
    """Train ``K`` backward models on forward-generated data against one frozen surrogate.

    Manifold ``k`` uses seed ``seed ^ k`` for its pseudo-data, initialisation
    and shuffling, so serial and concurrent runs give identical checkpoints.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    settings = settings or TrainSettings()
    shared = generate_augmented(fm, problem, n_prime, seed) if share_augmented else None

    def one(k):
        try:
            return train_manifold(fm, problem, k, n_prime, spec, gamma, settings, seed, shared)
        except TrainingError as exc:
            raise TrainingError(f"manifold {k}: {exc}", exc.epoch, f"backward[{k}]") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            backwards = list(pool.map(one, range(K)))
    else:
        backwards = [one(k) for k in range(K)]
    meta = {"seed": seed, "forward_sha256": fm.digest(), "share_augmented": share_augmented}
    return MixtureManifoldModel(fm, backwards, problem, meta)


def train_tandem_real(fm: ForwardModel, ds: Dataset, problem: ProblemSpec, spec: NetworkSpec,
                      gamma: float = DEFAULT_GAMMA, settings: TrainSettings = None,
                      seed: int = 0) -> MixtureManifoldModel:
    """Single backward model trained on the real dataset's y values (classic tandem)."""
    _, ytr = ds.part("train")
    _, yv = ds.part("val")
    bm = train_backward(fm, ytr, yv, spec, problem.bounds, gamma, settings, manifold_seed(seed, 0),
                        index=0, provenance="real", n_prime=None)
    return MixtureManifoldModel(fm, [bm], problem, {"seed": seed, "forward_sha256": fm.digest()})


# -- inference ----------------------------------------------------------------

def mmn_propose(model: MixtureManifoldModel, Y) -> tuple:
    """Batched mixture inference.

    Returns (proposals (Q, K, D), surrogate errors (Q, K), order (Q, K)) where
    ``order`` sorts each query's manifolds by ascending surrogate error with
    ties going to the lower manifold index.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    Q = len(Y)
    xs = np.stack([bm.predict(Y) for bm in model.backwards], axis=1)  # (Q, K, D)
    flat = xs.reshape(Q * model.K, -1)
    err = surrogate_error(model.forward, flat, np.repeat(Y, model.K, axis=0)).reshape(Q, model.K)
    order = np.argsort(err, axis=1, kind="stable")
    return xs, err, order


def mmn_infer_batch(model: MixtureManifoldModel, Y) -> List[ProposalSet]:
    xs, err, order = mmn_propose(model, Y)
    rows = np.arange(len(xs))[:, None]
    xs_sorted, err_sorted = xs[rows, order], err[rows, order]
    return [ProposalSet(xs_sorted[q], err_sorted[q], order[q]) for q in range(len(xs))]


def mmn_infer(model: MixtureManifoldModel, y) -> ProposalSet:
    """Propose one candidate per manifold for query ``y``, sorted by surrogate error."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != model.problem.dim_y:
        raise ValueError(f"query has {y.shape[-1]} dims, expected {model.problem.dim_y}")
    return mmn_infer_batch(model, y.reshape(1, -1))[0]


@dataclass
class NASettings:
    n_restarts: int = 50
    n_steps: int = 300
    lr: float = 0.01
    gamma: float = DEFAULT_GAMMA
    seed: int = 0


def na_infer_batch(fm: ForwardModel, problem: ProblemSpec, Y, settings: NASettings = None) -> List[ProposalSet]:
    """Neural adjoint: gradient descent on x through the frozen surrogate.

    Every query gets ``n_restarts`` starts drawn from the prior; all restarts of
    all queries are optimised together since rows never interact.
    """
    s = settings or NASettings()
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    Q, R = len(Y), s.n_restarts
    if R < 1:
        raise ValueError("n_restarts must be at least 1")
    X = sample_prior(problem, Q * R, make_rng(s.seed, STREAM_NA))
    T = np.repeat(Y, R, axis=0)
    bounds = np.asarray(problem.bounds, dtype=np.float64)
    alive = np.ones(len(X), dtype=bool)
    if s.n_steps > 0:
        opt = Adam([X], lr=s.lr)
        net = fm.net
        for _ in range(s.n_steps):
            out, dx = backprop_input(
                net, X, lambda o: 2.0 * (o - T.astype(o.dtype, copy=False)), check=False)
            _, bgrad = boundary_loss(X, bounds)
            grad = dx.astype(np.float64) + s.gamma * bgrad
            bad = ~np.all(np.isfinite(grad), axis=1) | ~np.all(np.isfinite(X), axis=1)
            if bad.any():
                alive &= ~bad
                grad[bad] = 0.0
            opt.step([X], [grad])
    out = fm.net._forward(X, keep=False, check=False)[0].astype(np.float64)
    err = np.mean((out - T) ** 2, axis=1)
    alive &= np.isfinite(err) & np.all(np.isfinite(X), axis=1)
    if not alive.all():
        warnings.warn(f"neural adjoint: dropped {int((~alive).sum())} diverged candidates",
                      RuntimeWarning)
    X = X.reshape(Q, R, -1)
    err = err.reshape(Q, R)
    alive = alive.reshape(Q, R)
    sets = []
    for q in range(Q):
        idx = np.flatnonzero(alive[q])
        o = idx[np.argsort(err[q, idx], kind="stable")]
        sets.append(ProposalSet(X[q, o], err[q, o], o))
    return sets


def na_infer(fm: ForwardModel, problem: ProblemSpec, y, n_restarts: int = 50, n_steps: int = 300,
             lr: float = 0.01, gamma: float = DEFAULT_GAMMA, seed: int = 0) -> ProposalSet:
    return na_infer_batch(fm, problem, np.asarray(y, dtype=np.float64).reshape(1, -1),
                          NASettings(n_restarts, n_steps, lr, gamma, seed))[0]
