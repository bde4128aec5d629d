"""Acceptance criteria 1-11, one test each.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py``.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from qhnet.attack import AttackSpec, ToyRestorer, fgsm, ifgsm
from qhnet.cli import main as cli_main
from qhnet.data import make_toy_corpus, weather_corrupt
from qhnet.experiment import ABLATIONS, run_ablation, run_toy_experiment
from qhnet.graph import NonDifferentiableError, grad_check, grad_check_params, input_gradient
from qhnet.metrics import psnr, ssim
from qhnet.network import QFARB, ChannelAttention, QConv2d, QHNet, QHNetConfig, SpatialAttention, count_parameters, parameter_breakdown
from qhnet.polythresh import (
    PUBLISHED_COEFFS,
    PolyThreshold,
    PolyThresholdLayer,
    apply_hard,
    apply_surrogate,
    feature_matrix,
    feature_vector,
    fit_mmse,
    soft_coeffs,
    threshold_tensor,
)
from qhnet.qtensor import I, J, K, ONE, QKernel, QTensor, hamilton, hamilton_product, qconv, split_activation
from qhnet.train import train_restorer
from qhnet.wht import OpCounter, wht1d, wht2d


def rand(*shape, seed=0, lo=-1.0, hi=1.0):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)


def scalarize(y, seed=99):
    return (y * rand(y.numel(), seed=seed).view_as(y)).sum()


# ---------------------------------------------------------------- 1


def left_matrix(p: np.ndarray) -> np.ndarray:
    a, b, c, d = p
    return np.array([[a, -b, -c, -d], [b, a, -d, c], [c, d, a, -b], [d, -c, b, a]])


def test_c01_algebra(acceptance):
    with acceptance(1, "Hamilton product vs 4x4 oracle, basis identities") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        p, q = rng.normal(size=(10_000, 4)), rng.normal(size=(10_000, 4))
        got = hamilton_product(torch.as_tensor(p), torch.as_tensor(q)).numpy()
        want = np.einsum("nij,nj->ni", np.stack([left_matrix(x) for x in p]), q)
        err = np.abs(got - want).max()
        assert err <= 1e-12, f"max error {err:.2e}"
        assert hamilton(I, J) == K and hamilton(J, I) == -K
        assert hamilton(J, K) == I and hamilton(K, I) == J
        for u in (I, J, K):
            assert hamilton(u, u) == -ONE
        assert hamilton(hamilton(I, J), K) == -ONE
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"runtime {elapsed:.2f} s"
        note(f"max error {err:.1e} on 10^4 pairs")


# ---------------------------------------------------------------- 2


def naive_wht2d(x: np.ndarray) -> np.ndarray:
    """Direct double sum with ``H[u, n] = (-1)^popcount(u & n) / sqrt(N)``."""

    def h(n):
        idx = np.arange(n)
        parity = np.vectorize(lambda v: bin(v).count("1") % 2)(idx[:, None] & idx[None, :])
        return (1.0 - 2.0 * parity) / math.sqrt(n)

    hr, hc = h(x.shape[0]), h(x.shape[1])
    return np.einsum("ua,vb,ab->uv", hr, hc, x)


def test_c02_transform(acceptance):
    with acceptance(2, "WHT involution, Parseval, naive oracle, butterfly op count") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        for h in (1, 2, 4, 8, 16, 32, 64):
            for w in (1, 4, 16, 64):
                x = rng.normal(size=(h, w))
                y = wht2d(torch.as_tensor(x)).numpy()
                assert np.abs(wht2d(torch.as_tensor(y)).numpy() - x).max() <= 1e-12
                assert abs((y**2).sum() - (x**2).sum()) <= 1e-12 * max(1.0, (x**2).sum())
                err = np.abs(y - naive_wht2d(x)).max()
                worst = max(worst, err)
                assert err <= 1e-12, f"{h}x{w}: {err:.2e}"
        for n in (2, 4, 8, 16, 64, 256, 1024):
            counter = OpCounter()
            wht1d(rng.normal(size=n), counter=counter)
            assert counter.adds == n * int(math.log2(n)), f"N={n}: {counter.adds} ops"
        elapsed = time.perf_counter() - t0
        assert elapsed < 5.0, f"runtime {elapsed:.2f} s"
        note(f"oracle error {worst:.1e} up to 64x64")


# ---------------------------------------------------------------- 3


def dot(f, a):
    """Left-to-right inner product; BLAS may reorder the sum and differ by an ulp."""
    acc = 0.0
    for fk, ak in zip(f.tolist(), a.tolist()):
        acc += fk * ak
    return acc


def piecewise_oracle(x, delta, a):
    n = len(a) - 1
    if abs(x) > delta:
        return a[n - 1] * x - a[n] * math.copysign(1.0, x) * delta
    return sum(a[k] * x ** (2 * k + 1) for k in range(n - 1))


def test_c03_thresholding(acceptance):
    with acceptance(3, "thresholding operator identities and published values") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        t = PolyThreshold(delta=0.8, coeffs=rng.normal(size=6))
        xs = rng.uniform(-3, 3, 2000)
        for x in xs:
            assert dot(feature_vector(x, t), t.coeffs) == apply_hard(x, t)
            assert apply_hard(-x, t) == -apply_hard(x, t)
        soft = PolyThreshold(delta=0.8, coeffs=soft_coeffs(5))
        for x in xs:
            assert apply_hard(x, soft) == math.copysign(max(abs(x) - 0.8, 0.0), x)
        grid = np.linspace(-3, 3, 1201)
        grid = grid[np.abs(np.abs(grid) - 0.8) > 0.01]
        errors = []
        for k in [2.0**i for i in range(12)]:
            s = PolyThreshold(delta=0.8, coeffs=t.coeffs, steepness=k, mode="surrogate")
            errors.append(max(abs(apply_surrogate(x, s) - apply_hard(x, t)) for x in grid))
        assert all(b < a for a, b in zip(errors, errors[1:])), "surrogate error not monotone"
        pub = PolyThreshold.published(delta=1.0)
        a = list(PUBLISHED_COEFFS) + [PUBLISHED_COEFFS[-1]]
        t05, t20 = apply_hard(0.5, pub), apply_hard(2.0, pub)
        assert abs(t05 - piecewise_oracle(0.5, 1.0, a)) <= 1e-9 and abs(t05 - 0.36331) < 1e-5
        assert abs(t20 - piecewise_oracle(2.0, 1.0, a)) <= 1e-9 and abs(t20 - 0.940) < 1e-12
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"runtime {elapsed:.2f} s"
        note(f"T(0.5)={t05:.6f} T(2.0)={t20:.6f}")


# ---------------------------------------------------------------- 4


def normal_equations(y, d, n, delta):
    rows = []
    for x in y:
        if abs(x) > delta:
            rows.append([0.0] * (n - 1) + [x, -math.copysign(1.0, x) * delta])
        else:
            rows.append([x ** (2 * k + 1) for k in range(n - 1)] + [0.0, 0.0])
    f = np.array(rows)
    return np.linalg.solve(f.T @ f, f.T @ d)


def test_c04_mmse_fit(acceptance):
    with acceptance(4, "MMSE fit: planted recovery and normal-equations oracle") as note:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        worst_plant, worst_oracle = 0.0, 0.0
        for _ in range(100):
            n, delta = int(rng.integers(2, 6)), rng.uniform(0.8, 1.2)
            y = rng.uniform(-2, 2, 400)
            a_true = rng.normal(size=n + 1)
            a = fit_mmse(y, feature_matrix(y, n, delta) @ a_true, n, delta)
            worst_plant = max(worst_plant, np.abs(a - a_true).max())
            d = 0.8 * y + rng.normal(scale=0.1, size=y.size)
            worst_oracle = max(worst_oracle, np.abs(fit_mmse(y, d, n, delta) - normal_equations(y, d, n, delta)).max())
        assert worst_plant <= 1e-8, f"planted error {worst_plant:.2e}"
        assert worst_oracle <= 1e-10, f"oracle error {worst_oracle:.2e}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 5.0, f"runtime {elapsed:.2f} s"
        note(f"planted {worst_plant:.1e}, oracle {worst_oracle:.1e}")


# ---------------------------------------------------------------- 5


def toy_qhnet():
    model = QHNet(QHNetConfig.toy(), seed=0).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        model.head.weight.copy_(0.01 * torch.randn(model.head.weight.shape, generator=g, dtype=torch.float64))
    return model.train()


def test_c05_gradients(acceptance):
    with acceptance(5, "finite-difference gradient checks") as note:
        t0 = time.perf_counter()
        eps, tol = 1e-5, 1e-4
        cfg = QHNetConfig.toy()
        torch.manual_seed(0)
        ca, sa, qf = (cls(cfg, 2).double() for cls in (ChannelAttention, SpatialAttention, QFARB))
        q = rand(5, 4, seed=1)
        w = rand(4, 2, 2, 3, 3, seed=2)
        x5 = rand(1, 4, 2, 5, 5, seed=3)
        act = rand(1, 4, 2, 3, 3, seed=4)
        act = torch.where(act.abs() < 0.05, act + 0.1, act)
        delta = torch.tensor([0.4, 0.9], dtype=torch.float64)
        coeffs = rand(6, seed=5)
        img = rand(1, 1, 12, 12, seed=6, lo=0, hi=1)
        checks = {
            "hamilton": (lambda v: scalarize(hamilton_product(v, q)), rand(5, 4, seed=7)),
            "qconv input": (lambda v: scalarize(qconv(QTensor(v), QKernel(w, padding=1)).data), x5),
            "qconv kernel": (lambda k: scalarize(qconv(QTensor(x5), QKernel(k, padding=1)).data), w),
            "wht2d": (lambda v: scalarize(wht2d(v)), rand(1, 2, 8, 4, seed=8)),
            **{
                f"split {n}": (lambda v, n=n: scalarize(split_activation(QTensor(v), n).data), act)
                for n in ("sigmoid", "tanh", "relu")
            },
            "channel attention": (lambda v: scalarize(ca(v)), rand(1, 8, 6, 6, seed=9)),
            "spatial attention": (lambda v: scalarize(sa(v)), rand(1, 8, 6, 6, seed=10)),
            "qfarb": (lambda v: scalarize(qf(v)), rand(1, 8, 6, 6, seed=11)),
            "surrogate threshold": (
                lambda v: scalarize(threshold_tensor(v, delta, coeffs, "surrogate", 1.0)),
                rand(1, 2, 4, 4, seed=12, lo=-2, hi=2),
            ),
            "ssim": (lambda v: ssim(v, img), rand(1, 1, 12, 12, seed=13, lo=0, hi=1)),
        }
        worst = 0.0
        for name, (f, point) in checks.items():
            err = grad_check(f, point, eps).max_rel_error
            worst = max(worst, err)
            assert err <= tol, f"{name}: rel err {err:.2e}"
        model = toy_qhnet()
        x = rand(1, 3, 8, 8, seed=14, lo=0.3, hi=0.7)
        y = rand(1, 3, 8, 8, seed=15, lo=0, hi=1)
        err = grad_check(lambda v: 0.5 * ((model(v) - y) ** 2).sum(), x, eps).max_rel_error
        assert err <= tol, f"toy QHNet input: {err:.2e}"
        worst = max(worst, err)
        pt = model.pt_layers()[0]
        params = [pt.delta, pt.coeffs, model.head.weight, model.shallow.weight]
        err = grad_check_params(lambda: 0.5 * ((model(x) - y) ** 2).sum(), params, eps).max_rel_error
        assert err <= tol, f"toy QHNet params: {err:.2e}"
        worst = max(worst, err)
        elapsed = time.perf_counter() - t0
        assert elapsed < 120.0, f"runtime {elapsed:.1f} s"
        note(f"{len(checks) + 2} checks, worst rel err {worst:.1e}")


# ---------------------------------------------------------------- 6


def test_c06_non_differentiability(acceptance):
    with acceptance(6, "hard thresholding blocks gradients, surrogate passes") as note:
        layer = PolyThresholdLayer(3).double()
        x = rand(1, 3, 4, 4, seed=16)
        layer.eval()
        with pytest.raises(NonDifferentiableError):
            input_gradient(layer, x, torch.zeros_like(x))
        layer.train()
        g = input_gradient(layer, x, torch.zeros_like(x))
        assert torch.isfinite(g).all() and g.abs().sum() > 0
        note("barrier raised in hard mode, finite gradient in surrogate mode")


# ---------------------------------------------------------------- 7


def test_c07_parameter_economy(acceptance):
    with acceptance(7, "quaternion parameter economy") as note:
        for cin, cout, k in ((1, 1, 1), (2, 3, 3), (4, 4, 3), (8, 16, 3)):
            qc = count_parameters(QConv2d(cin, cout, k, bias=False))
            rc = count_parameters(torch.nn.Conv2d(4 * cin, 4 * cout, k, bias=False))
            assert 4 * qc == rc, f"{cin}->{cout}: {qc} vs {rc}"
        q = count_parameters(QHNet(QHNetConfig.toy()))
        r = count_parameters(QHNet(QHNetConfig.toy(algebra="real")))
        assert q / r < 0.30, f"ratio {q / r:.3f}"
        note(f"toy {q} vs real twin {r} ({100 * q / r:.1f}%)")


# ---------------------------------------------------------------- 8


def test_c08_attacks(acceptance):
    with acceptance(8, "FGSM budget, one-step I-FGSM, degradation rate") as note:
        truth = make_toy_corpus(100, 32, seed=7)
        weather = weather_corrupt(truth, seed=8)
        model = ToyRestorer(width=16, seed=0)
        train_restorer(model, weather, truth, steps=150, batch=8, patch=32, seed=0)
        x = torch.as_tensor(weather, dtype=torch.float32)
        y = torch.as_tensor(truth, dtype=torch.float32)
        spec = AttackSpec(8, 1)
        adv = fgsm(model, x, y, spec)
        delta = (adv.double() - x.double()).abs()
        inside = (x > 8 / 255) & (x < 1 - 8 / 255)
        assert float(delta.max()) <= spec.radius * (1 + 1e-6)
        assert torch.allclose(delta[inside], torch.full_like(delta[inside], spec.radius), rtol=0, atol=1e-7)
        assert torch.equal(adv, ifgsm(model, x, y, spec))
        with torch.no_grad():
            before = np.array(psnr(model(x), y, reduction="none"))
            after = np.array(psnr(model(adv), y, reduction="none"))
        rate = float(np.mean(after < before))
        assert rate >= 0.95, f"degraded {rate:.0%}"
        note(f"degraded {rate:.0%} of 100 images, mean {before.mean():.2f} -> {after.mean():.2f} dB")


# ---------------------------------------------------------------- 9


def test_c09_toy_experiment(acceptance):
    with acceptance(9, "end-to-end toy purification") as note:
        t0 = time.perf_counter()
        r = run_toy_experiment(seed=0)
        elapsed = time.perf_counter() - t0
        att, dfd = r["attacked"], r["defended"]
        note(
            f"input PSNR {att['input_psnr']:.2f} -> {dfd['input_psnr']:.2f} dB, "
            f"SSIM {att['input_ssim']:.4f} -> {dfd['input_ssim']:.4f}; "
            f"target PSNR {att['target_psnr']:.2f} -> {dfd['target_psnr']:.2f} dB (clean {r['clean']['target_psnr']:.2f})"
        )
        assert dfd["input_psnr"] >= att["input_psnr"] + 2.0, f"PSNR {att['input_psnr']:.2f} -> {dfd['input_psnr']:.2f}"
        assert dfd["input_ssim"] > att["input_ssim"], f"SSIM {att['input_ssim']:.4f} -> {dfd['input_ssim']:.4f}"
        assert elapsed <= 600.0, f"runtime {elapsed:.0f} s"


# ---------------------------------------------------------------- 10

# reduced sampling keeps 3 seeds x 5 configurations near half an hour
ABLATION_TRAIN = {"patches_per_image": 4}


def test_c10_ablation(acceptance):
    with acceptance(10, "ablation parameter directions and SSIM majority") as note:
        full = parameter_breakdown(QHNet(QHNetConfig.toy()))["weights"]
        off = {n: parameter_breakdown(QHNet(QHNetConfig.toy(**{n: False})))["weights"] for n in ABLATIONS[1:]}
        assert off["use_qhpdb"] > full and off["use_qfarb"] < full
        assert off["use_attention"] < full and off["use_pt"] == full
        scores = run_ablation(seeds=(0, 1, 2), train_overrides=ABLATION_TRAIN)
        wins = {n: sum(a >= b for a, b in zip(scores["all"], scores[n])) for n in ABLATIONS[1:]}
        note("all-on " + " ".join(f"{v:.4f}" for v in scores["all"]))
        for n in ABLATIONS[1:]:
            note(f"{n} off " + " ".join(f"{v:.4f}" for v in scores[n]) + f" (all-on wins {wins[n]}/3)")
        losers = [n for n, w in wins.items() if w < 2]
        assert not losers, f"all-on loses the majority against {losers}; " + "; ".join(
            f"{n}: {scores[n]}" for n in ABLATIONS
        )


# ---------------------------------------------------------------- 11


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def cli_pipeline(root: Path) -> None:
    cwd = os.getcwd()
    os.chdir(root)
    try:
        steps = [
            ["gen", "--n", "4", "--size", "64", "--seed", "3", "--restorer-steps", "50", "--out", "gen"],
            ["attack", "--model", "gen/target.qhn", "--data", "gen", "--eps", "5", "--iters", "3", "--seed", "3",
             "--out", "att"],
            ["fit-thresholds", "--data", "att", "--patch", "32", "--out", "fit.json"],
            ["train", "--data", "att", "--seed", "3", "--epochs", "2", "--coeffs", "fit.json", "--out", "run"],
            ["defend", "--ckpt", "run/qhnet.qhn", "--in", "att/attacked", "--out", "def"],
            ["eval", "--pred", "def", "--ref", "att/clean", "--attacked", "att/attacked", "--out", "report.json"],
        ]
        for argv in steps:
            assert cli_main(argv) == 0, f"{argv[0]} failed"
    finally:
        os.chdir(cwd)


def test_c11_reproducibility(acceptance, tmp_path):
    with acceptance(11, "seeded CLI artifacts are bitwise identical") as note:
        torch.set_num_threads(1)
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        cli_pipeline(a)
        cli_pipeline(b)
        sa, sb = snapshot(a), snapshot(b)
        assert sa.keys() == sb.keys(), "different file sets"
        differ = [k for k in sa if sa[k] != sb[k]]
        assert not differ, f"differing artifacts: {differ}"
        note(f"{len(sa)} artifacts from gen, attack, fit-thresholds, train, defend, eval")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
