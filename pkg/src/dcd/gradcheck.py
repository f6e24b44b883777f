"""Analytic-versus-numeric gradient checks for every loss and the student graph."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from dcd import losses as L
from dcd.model import ScorerConfig, backward, flatten_grads, forward, init_scorer, score_pairs
from dcd.numeric import GradTape, finite_diff_grad, max_relative_error

TOLERANCE = 1e-4


def _case(rng):
    k, n = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    s = rng.normal(scale=2.0, size=(k, n))
    t = rng.normal(scale=2.0, size=(k, n))
    w = L.hard_label_weights(rng.uniform(0.1, 2.0, size=k))
    return s, t, w, L.soft_label_weights(w)


def _itm(s, t, w, c):
    return L.itm_loss(s[:, :2])


LOSSES = {
    "nce": lambda s, t, w, c: L.nce_loss(s),
    "itm": _itm,
    "itm_hard": lambda s, t, w, c: L.itm_hard_loss(s),
    "kl_distill": lambda s, t, w, c: L.kl_distill_loss(s, t, 1.7),
    "mse_distill": lambda s, t, w, c: L.mse_distill_loss(s, t),
    "vanilla_kd": lambda s, t, w, c: L.vanilla_kd_objective(L.mse_distill_loss(s, t), L.itm_hard_loss(s), 0.3),
    "witm": lambda s, t, w, c: L.witm_loss(s, w),
    "wds": lambda s, t, w, c: L.wds_loss(s, t, c),
    "dcd_objective": lambda s, t, w, c: L.dcd_objective(L.wds_loss(s, t, c), L.witm_loss(s, w), 0.6),
}


@dataclass
class CheckResult:
    name: str
    worst: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def _rng(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(name.encode()), seed])


def check_loss(name: str, instances: int = 20, seed: int = 0, corrupt: bool = False) -> CheckResult:
    fn = LOSSES[name]
    rng = _rng(name, seed)
    worst = 0.0
    for _ in range(instances):
        s, t, w, c = _case(rng)
        grad = fn(s, t, w, c).grad
        if name == "itm":
            full = np.zeros_like(s)
            full[:, :2] = grad
            grad = full
        if corrupt:
            grad = grad * 1.01 + 1e-3
        numeric = finite_diff_grad(lambda x: fn(x, t, w, c).value, s)
        worst = max(worst, max_relative_error(grad, numeric))
    return CheckResult(name, worst, instances)


def check_student_graph(regime: str = "dcd", instances: int = 20, seed: int = 0,
                        corrupt: bool = False) -> CheckResult:
    """Gradient of a training-batch objective with respect to all student parameters.

    Weights and teacher logits are held fixed while differentiating, as in training.
    """
    from dcd.train import TrainConfig, batch_loss

    name = f"student_graph[{regime}]"
    rng = _rng(name, seed)
    config = TrainConfig(regime=regime, alpha=0.4)
    worst = 0.0
    for _ in range(instances):
        k, n, di, dt = int(rng.integers(2, 4)), int(rng.integers(2, 4)), 3, 2
        params = init_scorer(ScorerConfig(di, dt, (4, 3), seed=int(rng.integers(1 << 30))))
        imgs, txts = rng.normal(size=(k * n, di)), rng.normal(size=(k * n, dt))
        teacher = rng.normal(scale=2.0, size=(k, n))
        s0 = score_pairs(params, imgs, txts).reshape(k, n)
        fixed = batch_loss(config, s0, teacher)

        def objective(theta):
            s = score_pairs(params.with_flat(theta), imgs, txts).reshape(k, n)
            return _frozen_objective(config, s, teacher, fixed)

        tape = GradTape()
        s = forward(params, imgs, txts, tape).reshape(k, n)
        grad = flatten_grads(backward(params, tape, batch_loss(config, s, teacher).combined.grad))
        if corrupt:
            grad = grad * 1.01 + 1e-3
        worst = max(worst, max_relative_error(grad, finite_diff_grad(objective, params.flat())))
    return CheckResult(name, worst, instances)


def _frozen_objective(config, s, teacher, fixed) -> float:
    """Batch objective with the weight vectors pinned to ``fixed``'s."""
    if fixed.hard_weights is None:
        from dcd.train import batch_loss

        return batch_loss(config, s, teacher).combined.value
    witm = L.witm_loss(s, fixed.hard_weights)
    wds = L.wds_loss(s, teacher, fixed.soft_weights)
    return L.dcd_objective(wds, witm, config.alpha).value


GRAPH_REGIMES = ("finetune", "vanilla_kd", "dcd", "student_uncertainty")


def run_all(instances: int = 20, seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    out = [check_loss(n, instances, seed, corrupt == n) for n in LOSSES]
    out += [check_student_graph(r, instances, seed, corrupt == f"student_graph[{r}]") for r in GRAPH_REGIMES]
    return out


def names() -> list[str]:
    return list(LOSSES) + [f"student_graph[{r}]" for r in GRAPH_REGIMES]


def report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<36} {'worst_rel_err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<36} {r.worst:>14.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
