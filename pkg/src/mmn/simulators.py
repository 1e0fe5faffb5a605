"""Benchmark forward processes, their priors, and an external-simulator adapter."""
from __future__ import annotations

import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

ARM_LENGTHS = (0.5, 0.5, 1.0)
ARM_VARIANCES = (1 / 16, 1 / 4, 1 / 4, 1 / 4)
Z95 = 1.96


class ConfigurationError(ValueError):
    pass


class ExternalSimulatorError(RuntimeError):
    def __init__(self, message: str, diagnostics: str = ""):
        self.diagnostics = diagnostics
        super().__init__(message + (f"\n{diagnostics}" if diagnostics else ""))


@dataclass(frozen=True)
class Prior:
    """``kind`` is one of ``uniform``, ``gaussian``, ``discrete_affine``.

    uniform:          ``a`` = lower, ``b`` = upper
    gaussian:         ``a`` = mean, ``b`` = variance
    discrete_affine:  integers uniform on [lo, hi], then (k - shift) / scale;
                      ``a`` = (lo, hi), ``b`` = (shift, scale), same for every dim
    """
    kind: str
    a: Tuple[float, ...]
    b: Tuple[float, ...]


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    dim_x: int
    dim_y: int
    prior: Prior
    bounds: Tuple[Tuple[float, float], ...]
    binding: str  # "sine" | "arm" | "external"

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])


def gaussian_bounds(mean: Sequence[float], variance: Sequence[float]):
    return tuple((m - Z95 * np.sqrt(v), m + Z95 * np.sqrt(v)) for m, v in zip(mean, variance))


SINE = ProblemSpec(
    "sine", 2, 1,
    Prior("uniform", (-1.0, -1.0), (1.0, 1.0)),
    ((-1.0, 1.0), (-1.0, 1.0)),
    "sine",
)

ARM = ProblemSpec(
    "arm", 4, 2,
    Prior("gaussian", (0.0,) * 4, ARM_VARIANCES),
    gaussian_bounds((0.0,) * 4, ARM_VARIANCES),
    "arm",
)

# Geometry of 8 shell thicknesses; the optics live in an external program.
SHELL = ProblemSpec(
    "shell", 8, 201,
    Prior("discrete_affine", (30, 70), (50, 20)),
    ((-1.0, 1.0),) * 8,
    "external",
)

PROBLEMS = {p.name: p for p in (SINE, ARM, SHELL)}


def get_problem(name: str) -> ProblemSpec:
    try:
        return PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


def sine_forward(x) -> np.ndarray:
    """y = sin(3 pi x1) + cos(3 pi x2); works on a 2-vector or an (N, 2) matrix."""
    x = np.asarray(x, dtype=np.float64)
    return np.sin(3 * np.pi * x[..., 0:1]) + np.cos(3 * np.pi * x[..., 1:2])


def arm_forward(x) -> np.ndarray:
    """End-point of a planar 3-segment arm on a vertical rail.

    x = (rail height, joint angle 1, 2, 3); returns (horizontal, vertical) with
    segment lengths 0.5, 0.5, 1.
    """
    x = np.asarray(x, dtype=np.float64)
    l1, l2, l3 = ARM_LENGTHS
    a1 = x[..., 1]
    a2 = a1 + x[..., 2]
    a3 = a2 + x[..., 3]
    y1 = l1 * np.sin(a1) + l2 * np.sin(a2) + l3 * np.sin(a3) + x[..., 0]
    y2 = l1 * np.cos(a1) + l2 * np.cos(a2) + l3 * np.cos(a3)
    return np.stack([y1, y2], axis=-1)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, *stream)`` through a SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


STREAM_PRIOR = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_NA = 4


def sample_prior(problem: ProblemSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` points from the problem's prior; ``seed`` may be an int or a Generator."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, STREAM_PRIOR)
    p = problem.prior
    d = problem.dim_x
    if p.kind == "uniform":
        return rng.uniform(np.asarray(p.a), np.asarray(p.b), size=(n, d))
    if p.kind == "gaussian":
        return np.asarray(p.a) + rng.standard_normal((n, d)) * np.sqrt(np.asarray(p.b))
    if p.kind == "discrete_affine":
        (lo, hi), (shift, scale) = p.a, p.b
        k = rng.integers(lo, hi, size=(n, d), endpoint=True)
        return (k - shift) / scale
    raise ConfigurationError(f"unknown prior kind {p.kind!r}")


@dataclass
class SimulatorHandle:
    """A problem bound to the code that evaluates it.

    For external bindings ``command`` is invoked as
    ``<command> <request.csv> <response.csv>`` inside ``exchange_dir``.
    """
    problem: ProblemSpec
    command: Optional[str] = None
    exchange_dir: Optional[Path] = None
    timeout: Optional[float] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __call__(self, X) -> np.ndarray:
        return simulate(self, X)


def simulate(handle: SimulatorHandle, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != handle.problem.dim_x:
        raise ValueError(f"expected {handle.problem.dim_x} columns, got {X.shape[1]}")
    binding = handle.problem.binding
    if binding == "sine":
        return sine_forward(X)
    if binding == "arm":
        return arm_forward(X)
    if binding == "external":
        return external_simulate(handle, X)
    raise ConfigurationError(f"unknown simulator binding {binding!r}")


def _write_matrix(path: Path, X: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in X:
            fh.write(",".join(format(float(v), ".17g") for v in row))
            fh.write("\n")


def _read_response(path: Path, n_rows: int, n_cols: int, diag: str) -> np.ndarray:
    if not path.exists():
        raise ExternalSimulatorError(f"simulator wrote no response file {path}", diag)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise ExternalSimulatorError(
                f"response line {lineno}: expected {n_cols} values, got {len(cells)}", diag)
        try:
            vals = [float(c) for c in cells]
        except ValueError:
            raise ExternalSimulatorError(f"response line {lineno}: non-numeric value", diag) from None
        if not all(np.isfinite(vals)):
            raise ExternalSimulatorError(f"response line {lineno}: non-finite value", diag)
        rows.append(vals)
    if len(rows) != n_rows:
        raise ExternalSimulatorError(
            f"response has {len(rows)} rows, request had {n_rows}", diag)
    return np.array(rows, dtype=np.float64).reshape(n_rows, n_cols)


def external_simulate(handle: SimulatorHandle, X) -> np.ndarray:
    """Evaluate ``X`` by file exchange with an external command."""
    if not handle.command:
        raise ConfigurationError(f"problem {handle.problem.name!r} needs an external simulator command")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != handle.problem.dim_x:
        raise ValueError(f"expected {handle.problem.dim_x} columns, got {X.shape[1]}")
    with handle._lock:
        with tempfile.TemporaryDirectory(dir=handle.exchange_dir) as tmp:
            req = Path(tmp) / "request.csv"
            resp = Path(tmp) / "response.csv"
            _write_matrix(req, X)
            argv = shlex.split(handle.command) + [str(req), str(resp)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=handle.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ExternalSimulatorError(f"could not run simulator: {exc}") from exc
            diag = (proc.stdout + proc.stderr).strip()
            if proc.returncode != 0:
                raise ExternalSimulatorError(
                    f"simulator exited with status {proc.returncode}", diag)
            return _read_response(resp, X.shape[0], handle.problem.dim_y, diag)


def builtin_handle(problem: ProblemSpec) -> SimulatorHandle:
    return SimulatorHandle(problem)


def handle_for(problem: ProblemSpec, command: Optional[str] = None,
               exchange_dir=None) -> SimulatorHandle:
    if problem.binding == "external" and not command:
        raise ConfigurationError(f"problem {problem.name!r} needs --sim-cmd")
    return SimulatorHandle(problem, command=command,
                           exchange_dir=Path(exchange_dir) if exchange_dir else None)
