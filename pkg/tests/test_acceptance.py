"""Acceptance gate: ten criteria, each reported as one PASS/FAIL line.

Criteria 1-5 and 9-10 are fast property checks. Criteria 6-8 train the
desk-scale grids (10 classes, 16×16, 60 epochs, seeds 0, 1, 2) once per
session, which takes several minutes on one core.

Run ``pytest tests/test_acceptance.py`` for the summary lines at the end
of the report, or ``python -m tests.test_acceptance`` to run the criteria
without pytest.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from dskd import losses as Lo
from dskd.config import ExperimentConfig, parse_config
from dskd.experiment import export_weight_distribution, grid_variants, read_weights, run_method, write_comparison
from dskd.gradcheck import numerical_grad, rel_error
from dskd.losses import DistillConfig
from dskd.models import (HeadOutput, StageSpec, build_network, copy_main_branch, forward_all_heads,
                         forward_inference, project_feature)
from dskd.tensor import Tensor
from dskd.trainer import pretrain_teacher

from . import oracles
from .test_losses import TINY

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def summary_lines():
    return [f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}" for n, (ok, detail) in sorted(RESULTS.items())]


# ------------------------------------------------------------------ 1. adaptive weights


def test_criterion_1_weight_correctness():
    rng = np.random.default_rng(2024)
    mats = []
    for i in range(1000):
        n, m = int(rng.integers(1, 33)), int(rng.integers(1, 5))
        losses = rng.exponential(1.0, size=(n, m)) * 10.0 ** rng.integers(-6, 4)
        losses[rng.random(n) < 0.1] = 0.0  # some all-zero rows
        mats.append(losses)
    start = time.perf_counter()
    outs = [Lo.adaptive_weights(x) for x in mats]
    elapsed = time.perf_counter() - start
    bad = 0
    for x, w in zip(mats, outs):
        zero = x.sum(axis=1) == 0
        ok = np.all(np.abs(w.sum(axis=1) - 1) < 1e-9) and np.all(w >= 0)
        ok &= np.all(w[zero] == 1.0 / x.shape[1])
        for row, wr in zip(x[~zero], w[~zero]):
            order = row[:, None] < row[None, :]
            ok &= bool(np.all((wr[:, None] < wr[None, :]) | ~order))
        bad += not ok
    record(1, bad == 0 and elapsed < 1.0, f"{1000 - bad}/1000 matrices valid, {elapsed:.3f}s")


# ------------------------------------------------------------------ 2. vanilla KD reduction


def test_criterion_2_vanilla_kd_reduction():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, k, L = int(rng.integers(1, 9)), int(rng.integers(2, 7)), int(rng.integers(1, 5))
        alpha, tau = float(rng.uniform(0, 3)), float(rng.uniform(0.5, 8))
        labels = np.eye(k)[rng.integers(0, k, n)]
        t_logits, t_feat = rng.normal(0, 3, (n, k)), rng.normal(size=(n, 5))
        heads = [HeadOutput(Tensor(rng.normal(size=(n, 5))), Tensor(rng.normal(0, 3, (n, k)))) for _ in range(L)]
        cfg = DistillConfig(alpha=alpha, beta=0.0, temperature=tau, enable_shallow_kd=False)
        got = Lo.total_loss(labels, HeadOutput(Tensor(t_feat), Tensor(t_logits)), heads, cfg).total
        last = heads[-1].logits.data
        ref = sum(oracles.ce(labels[i], last[i]) for i in range(n)) / n
        ref += alpha * sum(oracles.kl(t_logits[i], last[i], tau) for i in range(n)) / n
        worst = max(worst, abs(got - ref))
    record(2, worst < 1e-12, f"max |total - (CE + α·KL)| = {worst:.2e} over 100 instances")


# ------------------------------------------------------------------ 3. scalar oracle


def test_criterion_3_scalar_oracle():
    cfg = DistillConfig(alpha=1.0, beta=30.0, temperature=4.0)
    logits = [Tensor(np.array(h)) for h in TINY["heads"]]
    feats = [Tensor(np.array(f)) for f in TINY["feats"]]
    kd = Lo.kd_loss(np.array(TINY["teacher"]), logits, cfg)
    fea = Lo.fea_loss(np.array(TINY["t_feat"]), feats, cfg)
    outs = [HeadOutput(f, z) for f, z in zip(feats, logits)]
    tot = Lo.total_loss(np.array(TINY["labels"], float), HeadOutput(Tensor(TINY["t_feat"]), Tensor(TINY["teacher"])),
                        outs, cfg).total
    o_kd = oracles.kd_terms(TINY["teacher"], TINY["heads"], 4.0)
    o_fea = oracles.fea_terms(TINY["t_feat"], TINY["feats"])
    o_tot = oracles.total(TINY["labels"], TINY["teacher"], TINY["t_feat"], TINY["heads"], TINY["feats"], 1.0, 30.0, 4.0)
    errs = [abs(kd[0] - o_kd[0]), abs(kd[1] - o_kd[1]), abs(fea[0] - o_fea[0]), abs(fea[1] - o_fea[1]),
            abs(tot - o_tot)]
    record(3, max(errs) < 1e-10, f"max deviation from scalar oracle {max(errs):.2e}")


# ------------------------------------------------------------------ 4. gradient check


class _FrozenWeights:
    """Replays the adaptive weights of the base point so finite differences
    see the same stop-gradient objective as backward."""

    def __init__(self, monkeypatch):
        self.recorded, self.replay = [], None
        self._orig = Lo.adaptive_weights
        monkeypatch.setattr(Lo, "adaptive_weights", self)

    def __call__(self, losses):
        if self.replay is None:
            w = self._orig(losses)
            self.recorded.append(w)
            return w
        w = self.recorded[self.replay % len(self.recorded)]
        self.replay += 1
        return w


def test_criterion_4_gradient_check(monkeypatch):
    rng = np.random.default_rng(4)
    net = build_network([StageSpec(3), StageSpec(5, 1, True)], 4, with_aux_heads=True, seed=1, projection_dim=7)
    for p in net.parameters():  # move off the zero biases so no unit sits on a ReLU kink
        p.data = p.data + rng.normal(0, 0.05, p.data.shape)
    x = rng.uniform(size=(3, 3, 6, 6))
    y = np.eye(4)[[0, 2, 3]]
    teacher = HeadOutput(Tensor(rng.uniform(0, 2, (3, 7))), Tensor(rng.normal(0, 2, (3, 4))))
    cfg = DistillConfig(alpha=1.0, beta=30.0, temperature=4.0)
    frozen = _FrozenWeights(monkeypatch)

    def objective():
        outs = forward_all_heads(net, x)
        proj = [project_feature(net, h, o.feature, 7) for h, o in zip(net.heads, outs)]
        return Lo.total_loss(y, teacher, outs, cfg, proj).objective

    start = time.perf_counter()
    net.zero_grad()
    objective().backward()
    frozen.replay = 0
    worst, worst_name = 0.0, ""
    for name, p in net.params.items():
        err = rel_error(p.grad, numerical_grad(lambda: objective().item(), p))
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    count = net.num_parameters()
    record(4, count <= 2000 and worst < 1e-4 and elapsed < 120,
           f"{count} parameters, worst rel. error {worst:.1e} ({worst_name}), {elapsed:.1f}s")


# ------------------------------------------------------------------ 5. inference invariance


def test_criterion_5_inference_invariance():
    stages = [StageSpec(4), StageSpec(6, 1, True), StageSpec(8, 1, True)]
    equal = 0
    for seed in range(20):
        x = np.random.default_rng(seed).uniform(size=(4, 3, 12, 12))
        plain = build_network(stages, 10, with_aux_heads=False, seed=seed)
        aux = build_network(stages, 10, with_aux_heads=True, seed=seed + 1000, projection_dim=32)
        copy_main_branch(plain, aux)
        equal += np.array_equal(forward_inference(plain, x).data, forward_inference(aux, x).data)
    record(5, equal == 20, f"{equal}/20 seeds give bit-identical logits")


# ------------------------------------------------------------------ 6-10. desk-scale runs


class Desk:
    """Runs each distinct desk-scale configuration once and keeps the results."""

    def __init__(self, root: Path):
        self.root = root
        base = ExperimentConfig(output_dir=str(root))
        start = time.perf_counter()
        ckpt = pretrain_teacher(base, root / "teacher")
        self.teacher_seconds = time.perf_counter() - start
        self.base = base.replace(teacher_checkpoint=str(ckpt))
        self.results, self.seconds, self._by_key = {}, {}, {}

    def run(self, name, cfg):
        key = cfg.replace(output_dir="").to_text()
        if key not in self._by_key:
            start = time.perf_counter()
            self._by_key[key] = run_method(cfg.replace(output_dir=str(self.root / name)))
            self.seconds[name] = time.perf_counter() - start
        self.results[name] = self._by_key[key]
        return self.results[name]

    def grid(self, kind):
        out = {name: self.run(name, cfg) for name, cfg in grid_variants(self.base, kind).items()}
        write_comparison(out, self.root / f"comparison_{kind}")
        return out


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


def pp(x):
    return 100.0 * x


def test_criterion_6_methods_direction(desk):
    r = desk.grid("methods")
    s, kd, dskd = r["student_only"].mean, r["kd"].mean, r["dskd"].mean
    ok = s < kd and s < dskd and pp(dskd - kd) >= -0.2
    slowest = max(desk.seconds.get(m, 0.0) for m in r)
    record(6, ok and slowest < 900,
           f"student_only {r['student_only'].formatted()}, kd {r['kd'].formatted()}, dsn {r['dsn'].formatted()}, "
           f"dskd {r['dskd'].formatted()}; dskd-kd {pp(dskd - kd):+.2f}pp; slowest run {slowest:.0f}s")


def test_criterion_7_positions_direction(desk):
    r = desk.grid("positions")
    none = r["positions_none"].mean
    singles = [k for k in r if k not in ("positions_none", "positions_1_2")]
    ok = all(pp(r[k].mean - none) >= -0.3 for k in singles)
    record(7, ok, ", ".join(f"{k} {v.formatted()}" for k, v in r.items()))


def test_criterion_8_ablation_direction(desk):
    r = desk.grid("ablation")
    full = r["fea_on_adaptive_on"].mean
    ok = all(pp(r[k].mean - full) <= 0.3 for k in ("fea_off_adaptive_on", "fea_on_adaptive_off"))
    record(8, ok, ", ".join(f"{k} {v.formatted()}" for k, v in r.items()))


def test_criterion_9_weight_export(desk):
    dskd = desk.run("dskd", desk.base.replace(method="dskd"))
    ok, worst, var = True, 0.0, []
    for seed in desk.base.seeds:
        paths = [export_weight_distribution(dskd, layer, desk.root / f"w{layer}_{seed}.csv", seed) for layer in (1, 2)]
        w1, w2 = (np.array([float(line.split(",")[1]) for line in p.read_text().splitlines()[1:]]) for p in paths)
        worst = max(worst, float(np.max(np.abs(w1 + w2 - 1))))
        var.append(float(np.var(w1, ddof=1)))
        ok &= bool(np.all((w1 >= 0) & (w1 <= 1)))
    assert set(read_weights(dskd.weights_csvs[0])) == {"w_layer1", "w_layer2"}
    record(9, ok and worst < 1e-9 and min(var) > 0,
           f"max |w1+w2-1| {worst:.1e}, per-seed variance of layer-1 weights {', '.join(f'{v:.2e}' for v in var)}")


def test_criterion_10_determinism(desk):
    first = desk.run("dskd", desk.base.replace(method="dskd"))
    run_dir = Path(first.metrics_csvs[0]).parent
    again_dir = desk.root / "dskd_rerun"
    again = parse_config(run_dir / "config.txt", {"output_dir": str(again_dir), "seeds": "0"})
    run_method(again)
    same = (run_dir / "metrics_seed0.csv").read_bytes() == (again_dir / "metrics_seed0.csv").read_bytes()
    record(10, same, "rerun of config.txt (seed 0) " + ("reproduces" if same else "differs from") +
           " metrics_seed0.csv byte for byte")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
