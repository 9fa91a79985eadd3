"""Built-in numeric self-checks: gradient verification against finite
differences, loss agreement with independent brute-force summation, and
round trips of the on-disk formats. Meant to be cheap enough to run on any
install before trusting a training run.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .encoders import FlattenMap
from .io import read_tensor, write_tensor
from .losses import LossConfig, contras
from .soir import retrieve

__all__ = ["run_self_checks", "contras_oracle", "weighted_soi_oracle"]


# ---------------------------------------------------------------------------
# independent loss oracles (plain scalar loops, no shared code with losses.py)
# ---------------------------------------------------------------------------

def contras_oracle(x: np.ndarray, y: np.ndarray, sigma: float,
                   normalize: bool = True, weights=None) -> float:
    """Direct double-loop evaluation of the symmetric contrastive loss."""
    x = np.array(x, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    n = x.shape[0]
    if normalize:
        x = np.array([row / max(np.linalg.norm(row), 1e-12) for row in x])
        y = np.array([row / max(np.linalg.norm(row), 1e-12) for row in y])
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = 0.0
    for i in range(n):
        num = math.exp(float(np.dot(x[i], y[i])) / sigma)
        den = sum(math.exp(float(np.dot(x[i], y[j])) / sigma) for j in range(n))
        total += -w[i] * math.log(num / den)
        num2 = math.exp(float(np.dot(y[i], x[i])) / sigma)
        den2 = sum(math.exp(float(np.dot(y[i], x[j])) / sigma) for j in range(n))
        total += -w[i] * math.log(num2 / den2)
    return total / n


def weighted_soi_oracle(slots, sigma: float, normalize: bool = True) -> float:
    """Brute-force weighted tri-modal loss: slots is a list of (g, t, p, f)."""
    total = 0.0
    for g, t, p, f in slots:
        total += contras_oracle(t, p, sigma, normalize, weights=g)
        total += contras_oracle(t, f, sigma, normalize, weights=g)
        total += contras_oracle(f, p, sigma, normalize, weights=g)
    return total


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def _check_gradients(rng) -> tuple[bool, str]:
    worst = 0.0
    # constants must be sampled once; finite differences re-evaluate the fn
    m43 = Tensor(rng.normal(size=(4, 3)))
    w34 = Tensor(rng.normal(size=(3, 4)))
    v5 = Tensor(rng.normal(size=(5,)))
    q4 = Tensor(rng.normal(size=(4,)))
    y43 = Tensor(rng.normal(size=(4, 3)))
    cases = [
        ("matmul", lambda x: ad.matmul(x, m43).sum(), (3, 4)),
        ("softmax", lambda x: (ad.softmax(x, axis=-1) ** 2).sum(), (3, 5)),
        ("sigmoid", lambda x: ad.sigmoid(x).sum(), (6,)),
        ("l2_normalize", lambda x: (ad.l2_normalize(x) * w34).sum(), (3, 4)),
        ("cosine_sim", lambda x: ad.cosine_sim(x, v5).sum(), (5,)),
        ("retrieve", lambda x: retrieve(q4, x).feature.sum(), (6, 4)),
        ("contras", lambda x: contras(x, y43, 0.2), (4, 3)),
    ]
    for name, fn, shape in cases:
        err = grad_check(fn, rng.normal(size=shape))
        worst = max(worst, err)
        if err > 1e-4:
            return False, f"{name} gradient error {err:.2e} exceeds 1e-4"
    return True, f"max relative error {worst:.2e}"


def _check_loss_oracle(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        n, d = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        ours = float(contras(Tensor(x), Tensor(y), 0.1).data)
        ref = contras_oracle(x, y, 0.1)
        worst = max(worst, abs(ours - ref))
    ok = worst <= 1e-10
    return ok, f"max abs deviation {worst:.2e} vs brute-force summation"


def _check_roundtrips(rng) -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as tmp:
        arr = rng.normal(size=(3, 5)).astype(np.float32)
        write_tensor(Path(tmp) / "t.bt", arr)
        back = read_tensor(Path(tmp) / "t.bt")
        if not np.array_equal(arr, back):
            return False, "tensor file round trip not bitwise equal"
        fmap = FlattenMap.identity(4, 6)
        vox = rng.normal(size=24)
        if not np.array_equal(fmap.unflatten(fmap.flatten(vox)), vox):
            return False, "flatten map round trip failed"
        fmap.save(Path(tmp) / "m.json")
        reloaded = FlattenMap.load(Path(tmp) / "m.json")
        if not (np.array_equal(reloaded.rows, fmap.rows)
                and np.array_equal(reloaded.cols, fmap.cols)):
            return False, "flatten map save/load mismatch"
    return True, "tensor file and flatten map round trips exact"


def _check_invariants(rng) -> tuple[bool, str]:
    x = rng.normal(size=(4, 7)) * 100
    s = ad.softmax(Tensor(x), axis=1).data.sum(axis=1)
    if np.max(np.abs(s - 1.0)) > 1e-12:
        return False, "softmax rows do not sum to 1"
    v = Tensor(np.array([0.5, 0.5, 0.1]))
    _, idx = ad.topk(v, 1)
    if idx[0] != 0:
        return False, "topk tie-break is not lowest-index-first"
    n = ad.l2_normalize(Tensor(rng.normal(size=(3, 5))))
    again = ad.l2_normalize(n)
    if np.max(np.abs(n.data - again.data)) > 1e-12:
        return False, "l2_normalize is not idempotent"
    return True, "softmax / topk / normalize invariants hold"


def run_self_checks(seed: int = 0, report=print) -> bool:
    """Run every check, print one line each, return overall pass."""
    rng = np.random.default_rng(seed)
    checks = [
        ("gradients-vs-finite-differences", _check_gradients),
        ("loss-vs-bruteforce-oracle", _check_loss_oracle),
        ("file-format-roundtrips", _check_roundtrips),
        ("kernel-invariants", _check_invariants),
    ]
    all_ok = True
    for name, fn in checks:
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        report(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
