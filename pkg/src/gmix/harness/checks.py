"""Self-checks behind ``gmix check``: gradient, partition and reduction oracles."""
from __future__ import annotations

from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from .. import model as M
from .. import tensor as T
from ..augment import MixupConfig
from ..data import gen_two_moons, batches
from ..rng import RunStreams
from ..sharpness import SamConfig, compute_delta, partition_by_sensitivity, plus_size
from ..trainers import STEP_FUNCTIONS, TrainConfig, decompose_gradient


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_gradients(n_models: int = 10, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        p = int(rng.integers(1, 6))
        hidden = tuple(int(h) for h in rng.integers(1, 17, size=int(rng.integers(0, 3))))
        m = int(rng.integers(2, 5))
        spec = M.MlpSpec(p, hidden, m)
        b = 4
        batch = SimpleNamespace(x=rng.uniform(-2, 2, size=(b, p)),
                                y=np.eye(m)[rng.integers(m, size=b)])
        w = M.params_to_vector(M.init_model(spec, rng))
        coords = rng.choice(w.size, size=min(20, w.size), replace=False)
        worst = max(worst, T.grad_check(lambda f: M.forward_flat(f, spec, batch), w, 1e-5, coords))
    return CheckResult("gradients", worst < tol, f"max relative error {worst:.2e} (tol {tol:g})")


def brute_partition(scores, gamma):
    n = len(scores)
    k = plus_size(gamma, n)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return sorted(order[:k]), sorted(order[k:])


def check_partition(n_vectors: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for t in range(n_vectors):
        n = int(rng.integers(1, 40))
        scores = rng.integers(0, 3, size=n).astype(float) if t % 5 == 0 else rng.normal(size=n)
        gamma = float(rng.uniform(0.01, 1.0))
        part = partition_by_sensitivity(scores, gamma)
        plus, minus = brute_partition(list(scores), gamma)
        if list(part.plus_indices) != plus or list(part.minus_indices) != minus:
            return CheckResult("partition", False, f"mismatch on vector {t}: {scores.tolist()}")
    return CheckResult("partition", True, f"{n_vectors} score vectors agree with a full sort")


def check_perturbation(n: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = SamConfig(rho=0.5)
    worst_norm = worst_cos = 0.0
    for _ in range(n):
        g = rng.normal(size=int(rng.integers(1, 50))) * 10.0 ** rng.uniform(-5, 5)
        rec = compute_delta(g, cfg)
        worst_norm = max(worst_norm, abs(rec.norm - cfg.rho) / cfg.rho)
        cos = rec.delta @ g / (np.linalg.norm(rec.delta) * np.linalg.norm(g))
        worst_cos = max(worst_cos, 1.0 - cos)
    zero = compute_delta(np.zeros(3), cfg)
    ok = worst_norm <= 1e-9 and worst_cos <= 1e-12 and zero.skipped and not zero.delta.any()
    return CheckResult("perturbation", ok,
                       f"norm error {worst_norm:.1e}, 1 - cosine {worst_cos:.1e}, zero skipped={zero.skipped}")


def check_decomposition(n: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_sum = worst_dot = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 200))
        g, gb = rng.normal(size=d), rng.normal(size=d)
        dec = decompose_gradient(g, gb)
        worst_sum = max(worst_sum, float(np.max(np.abs(dec.parallel + dec.orthogonal - g))))
        worst_dot = max(worst_dot, abs(dec.orthogonal @ gb) / (np.linalg.norm(g) * np.linalg.norm(gb)))
    ok = worst_sum <= 1e-12 and worst_dot <= 1e-8
    return CheckResult("decomposition", ok, f"sum error {worst_sum:.1e}, scaled dot {worst_dot:.1e}")


def _update(method, params, batch, cfg, seed, lam=None):
    new, _ = STEP_FUNCTIONS[method](params, batch, 0.1, replace(cfg, method=method),
                                    RunStreams.from_seed(seed), lam=lam)
    return M.params_to_vector(new)


def check_reductions(n_batches: int = 5, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    ds = gen_two_moons(256, 0.25, seed)
    spec = M.MlpSpec(2, (16, 16), 2)
    base = TrainConfig()
    pairs = {
        "sam(rho=0)=vanilla": (("sam", replace(base, sam=SamConfig(rho=0.0)), None), ("vanilla", base, None)),
        "gmix(rho=0)=mixup": (("gmix", replace(base, sam=SamConfig(rho=0.0)), None), ("mixup", base, None)),
        "gmix(lam=1)=sam": (("gmix", base, 1.0), ("sam", base, None)),
        "bgmix(gamma=1)=gmix": (("bgmix", replace(base, gamma=1.0), None), ("gmix", base, None)),
        "dgmix(gamma=1)=gmix": (("dgmix", replace(base, gamma=1.0), None), ("gmix", base, None)),
        "gmix(no mixup)=sam": (("gmix", replace(base, mixup=MixupConfig(enabled=False)), None), ("sam", base, None)),
    }
    worst = {k: 0.0 for k in pairs}
    for i, batch in enumerate(batches(ds, 32, seed, 0)[:n_batches]):
        params = M.init_model(spec, seed + i)
        for name, ((m1, c1, l1), (m2, c2, l2)) in pairs.items():
            a = _update(m1, params, batch, c1, seed + i, l1)
            b = _update(m2, params, batch, c2, seed + i, l2)
            worst[name] = max(worst[name], float(np.max(np.abs(a - b))))
    bad = [k for k, v in worst.items() if v > tol]
    detail = ", ".join(f"{k}: {v:.1e}" for k, v in worst.items())
    return CheckResult("reductions", not bad, detail)


CHECKS = {
    "gradients": check_gradients,
    "partition": check_partition,
    "perturbation": check_perturbation,
    "decomposition": check_decomposition,
    "reductions": check_reductions,
}


def run_checks(names=None, seed: int = 0) -> list:
    return [CHECKS[n](seed=seed) for n in (names or CHECKS)]
