"""Acceptance gate at desk scale.

Each test prints one ``CRITERION n ... PASS|FAIL`` line. Run on its own with
``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Full desk runs are cached per (problem, seed) for the session; the whole file
takes roughly a quarter of an hour on a laptop CPU.
"""
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from gradcheck import check_param_grads, fd_input_grad, random_net, rel_err
from mmn.cli import main as cli
from mmn.config import RunConfig
from mmn.datasets import generate_dataset, load_dataset
from mmn.evaluation import (ablate_K, ablate_augmentation, evaluate_mmn, evaluate_proposals,
                            read_report_rows, time_mmn, time_na)
from mmn.inverse import (MixtureManifoldModel, NASettings, ProposalSet, boundary_loss,
                         boundary_loss_relu, mmn_infer_batch, na_infer_batch,
                         train_backward, train_forward, train_mmn, train_tandem_real)
from mmn.nn import NetworkSpec, input_gradients
from mmn.simulators import (SHELL, SINE, arm_forward, builtin_handle, get_problem, sample_prior,
                            sine_forward)
from mmn.training import TrainSettings

SEEDS = (1, 2, 3)
RESULTS = []

pytestmark = pytest.mark.slow


def report(capsys, number, ok, detail):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


# -- shared desk runs -------------------------------------------------------------------

class DeskRun:
    def __init__(self, problem, seed, forward, model, tandem, ds, seconds):
        self.problem, self.seed = problem, seed
        self.forward, self.model, self.tandem, self.ds = forward, model, tandem, ds
        self.seconds = seconds

    @property
    def test_y(self):
        return self.ds.part("test")[1]

    def r1(self, model):
        return evaluate_mmn(model, self.test_y, builtin_handle(self.problem), 1).mean_resim(1)


def _cli_pipeline(root: Path, seed: int):
    common = ["--problem", "sine", "--profile", "desk", "--seed", str(seed), "--out", str(root)]
    for cmd in (["gen-data"], ["train"], ["eval", "--t-max", "6"]):
        assert cli(cmd + common) == 0
    return root / f"sine-desk-s{seed}"


@lru_cache(maxsize=None)
def sine_cli_run(root: str):
    t0 = time.perf_counter()
    run_dir = _cli_pipeline(Path(root), 1)
    return run_dir, time.perf_counter() - t0


@lru_cache(maxsize=None)
def desk_run(name: str, seed: int, root: str) -> DeskRun:
    problem = get_problem(name)
    cfg = RunConfig(problem=name, profile="desk", seed=seed)
    t0 = time.perf_counter()
    if name == "sine" and seed == 1:
        run_dir, seconds = sine_cli_run(root)
        ds = load_dataset(run_dir / "dataset.csv")
        model = MixtureManifoldModel.load(run_dir / "bundle")
        fm = model.forward
        t0 -= seconds
    else:
        ds = generate_dataset(problem, tuple(cfg.sizes), seed)
        fm = train_forward(ds, cfg.forward_spec(problem.dim_x, problem.dim_y),
                           cfg.forward_settings(), seed)
        model = train_mmn(fm, problem, cfg.k, cfg.n_prime,
                          cfg.backward_spec(problem.dim_x, problem.dim_y), cfg.gamma,
                          cfg.backward_settings(), seed)
    tandem = train_tandem_real(fm, ds, problem, cfg.backward_spec(problem.dim_x, problem.dim_y),
                               cfg.gamma, cfg.backward_settings(), seed)
    return DeskRun(problem, seed, fm, model, tandem, ds, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("acceptance"))


# -- 1. exact math ----------------------------------------------------------------------

def test_criterion_1_exact_math(capsys):
    checks = {}
    checks["sine"] = (sine_forward([0, 0])[0] == 1.0
                      and abs(sine_forward([1 / 6, 1 / 3])[0]) <= 1e-6
                      and abs(sine_forward([1 / 3, 0])[0] - 1.0) <= 1e-6)
    checks["arm"] = (np.allclose(arm_forward([0, 0, 0, 0]), [0, 2], atol=1e-12)
                     and np.allclose(arm_forward([1, np.pi / 2, 0, 0]), [3, 0], atol=1e-6)
                     and np.allclose(arm_forward([0, 0, np.pi / 2, 0]), [1.5, 0.5], atol=1e-6))
    rng = np.random.default_rng(0)
    x = rng.uniform(-4, 4, size=(10000, 2))
    v, _ = boundary_loss(x, [(-1, 1), (-1, 1)])
    relu = np.array([boundary_loss_relu(row, [(-1, 1), (-1, 1)]) for row in x])
    checks["boundary"] = (np.max(np.abs(v - relu)) <= 1e-6
                          and boundary_loss([1.2, -1.5], [(-1, 1), (-1, 1)])[0] == pytest.approx(0.7, abs=1e-6)
                          and boundary_loss([0, 0], [(-1, 1), (-1, 1)])[0] == 0)
    shell = sample_prior(SHELL, 20000, 1)
    lattice = (np.arange(30, 71) - 50) / 20
    checks["shell"] = (np.all(np.isin(shell, lattice)) and shell.min() == -1.0
                       and shell.max() == 1.0 and (30 - 50) / 20 == -1 and (70 - 50) / 20 == 1)
    sets = [ProposalSet(rng.uniform(-1, 1, (6, 2)), np.sort(rng.uniform(0, 1, 6)), np.arange(6))
            for _ in range(200)]
    rep = evaluate_proposals(sets, rng.uniform(-2, 2, (200, 1)), builtin_handle(SINE), 6)
    curve = [v for _, v in rep.curve()]
    checks["rbar"] = all(a >= b for a, b in zip(curve, curve[1:]))
    failed = [k for k, ok in checks.items() if not ok]
    report(capsys, 1, not failed, f"exact-math checks {sorted(checks)}; failed: {failed or 'none'}")


# -- 2. gradients -----------------------------------------------------------------------

def test_criterion_2_gradients(capsys):
    worst_p = worst_x = 0.0
    nets = 0
    for seed in range(24):
        rng = np.random.default_rng(1000 + seed)
        hidden = (int(rng.integers(2, 9)),) if seed % 3 else (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        spec = NetworkSpec(int(rng.integers(1, 5)), int(rng.integers(1, 4)), hidden,
                           use_batch_norm=seed % 2 == 0)
        net = random_net(rng, spec)
        X = rng.normal(size=(4, spec.input_dim))
        T = rng.normal(size=(4, spec.output_dim))
        worst_p = max(worst_p, check_param_grads(net, X, T))
        net.eval()
        g = input_gradients(net, X[0], T[0])
        fd, ok = fd_input_grad(net, X[0], T[0])
        if ok.any():
            worst_x = max(worst_x, float(rel_err(g[ok], fd[ok]).max()))
        nets += 1
    ok = worst_p < 1e-4 and worst_x < 1e-4 and nets >= 20
    report(capsys, 2, ok, f"{nets} nets (half with batch norm): worst param rel err {worst_p:.2e}, "
                          f"worst input rel err {worst_x:.2e} (< 1e-4)")


# -- 3. invariants on a trained desk model ---------------------------------------------

def test_criterion_3_invariants(capsys, runs_root):
    run = desk_run("sine", 1, runs_root)
    fm = run.forward
    before = fm.digest()
    _, ytr = run.ds.part("train")
    _, yv = run.ds.part("val")
    spec = NetworkSpec(1, 2, (32, 32), use_batch_norm=False)
    train_backward(fm, ytr[:500], yv[:100], spec, SINE.bounds, 0.1,
                   TrainSettings(epochs=2, batch_size=64), seed=1)
    train_mmn(fm, SINE, 2, 300, spec, 0.1, TrainSettings(epochs=1, batch_size=64), seed=1)
    na_infer_batch(fm, SINE, run.test_y[:10], NASettings(5, 10))
    hash_ok = fm.digest() == before == run.model.forward.digest()
    Y = np.random.default_rng(3).uniform(-2, 2, (1000, 1))
    sets = mmn_infer_batch(run.model, Y)
    brute = np.stack([np.mean((fm.predict(bm.predict(Y)) - Y) ** 2, axis=1)
                      for bm in run.model.backwards], axis=1).min(axis=1)
    selected = np.array([ps.surrogate_errors[0] for ps in sets])
    sel_ok = bool(np.array_equal(selected, brute))
    report(capsys, 3, hash_ok and sel_ok,
           f"forward hash unchanged: {hash_ok}; selection == brute-force min on 1000 queries: {sel_ok}")


# -- 4. sine desk run ------------------------------------------------------------------

def test_criterion_4_sine_desk(capsys, runs_root):
    run_dir, seconds = sine_cli_run(runs_root)
    curve = read_report_rows(run_dir / "curves" / "forward.csv")
    fwd_val = min(float(r["val_loss"]) for r in curve)
    summary = {int(r["T"]): float(r["mean_resim"]) for r in read_report_rows(run_dir / "eval" / "summary.csv")}
    r1, r6 = summary[1], summary[6]
    ok = fwd_val <= 1e-3 and r1 <= 2e-2 and r6 <= r1 and seconds <= 20 * 60
    report(capsys, 4, ok, f"forward val MSE {fwd_val:.3e} (<= 1e-3), r(1) {r1:.3e} (<= 2e-2), "
                          f"r(6) {r6:.3e} (<= r(1)), {seconds:.0f} s (<= 1200 s)")


# -- 5. arm desk run -------------------------------------------------------------------

def test_criterion_5_arm_desk(capsys, runs_root):
    run = desk_run("arm", 1, runs_root)
    r1 = run.r1(run.model)
    ok = r1 <= 5e-3 and run.seconds <= 20 * 60
    report(capsys, 5, ok, f"arm r(1) {r1:.3e} (<= 5e-3), {run.seconds:.0f} s (<= 1200 s)")


# -- 6. orderings over three seeds ------------------------------------------------------

def _majority(flags):
    return sum(flags) >= 2


def test_criterion_6a_mmn_beats_tandem(capsys, runs_root):
    lines, votes = [], {}
    for name in ("sine", "arm"):
        flags = []
        for seed in SEEDS:
            run = desk_run(name, seed, runs_root)
            m, t = run.r1(run.model), run.r1(run.tandem)
            flags.append(m < t)
            lines.append(f"{name} s{seed}: mmn {m:.2e} vs tandem {t:.2e}")
        votes[name] = _majority(flags)
    report(capsys, "6a", all(votes.values()), f"majority per problem {votes}; " + "; ".join(lines))


def test_criterion_6b_k_sweep(capsys, runs_root):
    flags, lines = [], []
    for seed in SEEDS:
        run = desk_run("sine", seed, runs_root)
        sweep = ablate_K(run.model, run.test_y, builtin_handle(SINE), 6)
        k1, k6 = sweep.rows[0]["mean_resim"], sweep.rows[-1]["mean_resim"]
        flags.append(k6 < k1)
        lines.append(f"s{seed}: K=1 {k1:.2e} -> K=6 {k6:.2e}")
    report(capsys, "6b", _majority(flags), "; ".join(lines))


def test_criterion_6c_augmentation_sweep(capsys, runs_root):
    flags, lines = [], []
    for seed in SEEDS:
        run = desk_run("sine", seed, runs_root)
        cfg = RunConfig(problem="sine", profile="desk", seed=seed)
        # the MMN's first manifold already covers the ratio-5 point
        reuse = {cfg.n_prime: run.model.backwards[0]}
        sweep = ablate_augmentation(run.forward, run.ds, SINE, [0.5, 1, 2, 5],
                                    cfg.backward_spec(2, 1), cfg.gamma, cfg.backward_settings(),
                                    seed, run.test_y, builtin_handle(SINE), reference=run.tandem,
                                    reuse=reuse)
        best = min(r["relative"] for r in sweep.rows)
        flags.append(best < 1)
        lines.append(f"s{seed}: best relative {best:.3f} (crossover {sweep.crossover})")
    report(capsys, "6c", _majority(flags), "; ".join(lines))


# -- 7. speed --------------------------------------------------------------------------

def test_criterion_7_speed(capsys, runs_root):
    run = desk_run("sine", 1, runs_root)
    Y = np.resize(run.ds.Y, (1000, 1))
    mmn = time_mmn(run.model, Y, sequential=False)["batched_s"]
    na = time_na(run.forward, SINE, Y, NASettings(50, 300), sequential=False)["batched_s"]
    ratio = na / mmn
    report(capsys, 7, ratio >= 5, f"1000 queries: MMN {mmn:.3f} s, NA {na:.2f} s, ratio {ratio:.0f}x (>= 5x)")


# -- 8. determinism ---------------------------------------------------------------------

def test_criterion_8_determinism(capsys, runs_root, tmp_path):
    first, _ = sine_cli_run(runs_root)
    second = _cli_pipeline(tmp_path, 1)
    a = (first / "eval" / "summary.csv").read_bytes()
    b = (second / "eval" / "summary.csv").read_bytes()
    report(capsys, 8, a == b, f"summary CSVs byte-identical across reruns: {a == b}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
