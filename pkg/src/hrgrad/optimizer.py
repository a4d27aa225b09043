"""Adam with round-robin per-task first moments and the HRGrad operator in the loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .aggregation import hrgrad
from .core import ContractError, GradientSet, InvalidInputError, NumericTolerances
from .rotation import MerConfig


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidInputError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise InvalidInputError("eps must be > 0")


@dataclass(frozen=True)
class LRSchedule:
    """Staircase exponential decay ``eta0 * decay ** floor(i / period)``."""

    eta0: float = 1e-3
    decay: float = 0.96
    period: int = 200

    def __post_init__(self):
        if not (self.eta0 > 0 and 0 < self.decay <= 1 and self.period >= 1):
            raise InvalidInputError("need eta0 > 0, 0 < decay <= 1, period >= 1")

    def __call__(self, i: int) -> float:
        k = int(i) // self.period
        return self.eta0 if k == 0 else self.eta0 * self.decay**k


@dataclass(eq=False)
class HROptimizerState:
    theta: np.ndarray
    task_m: np.ndarray  # m x D per-task first moments
    task_t: np.ndarray  # per-task step counters
    shared_m: np.ndarray
    shared_v: np.ndarray
    global_t: int = 0
    prev_losses: np.ndarray | None = None

    @classmethod
    def fresh(cls, theta, m: int) -> "HROptimizerState":
        theta = np.array(theta, dtype=float, copy=True).ravel()
        D = theta.size
        return cls(theta, np.zeros((m, D)), np.zeros(m, dtype=np.int64), np.zeros(D), np.zeros(D))

    @property
    def m(self) -> int:
        return self.task_m.shape[0]

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "task_m": self.task_m.tolist(),
            "task_t": [int(t) for t in self.task_t],
            "shared_m": self.shared_m.tolist(),
            "shared_v": self.shared_v.tolist(),
            "global_t": int(self.global_t),
            "prev_losses": None if self.prev_losses is None else self.prev_losses.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HROptimizerState":
        prev = d.get("prev_losses")
        return cls(
            np.array(d["theta"], dtype=float),
            np.array(d["task_m"], dtype=float).reshape(len(d["task_t"]), -1),
            np.array(d["task_t"], dtype=np.int64),
            np.array(d["shared_m"], dtype=float),
            np.array(d["shared_v"], dtype=float),
            int(d["global_t"]),
            None if prev is None else np.array(prev, dtype=float),
        )


@dataclass(eq=False)
class StepReport:
    task: int
    t: int
    lr: float
    direction: np.ndarray  # operator output
    s_c: float
    angles: np.ndarray
    conflicts: list[int]
    degenerate: bool
    active: list[int] = field(default_factory=list)


class HRAdam:
    """Adam whose first-moment estimate is replaced by HRGrad over per-task momenta.

    Call :meth:`step` once per task gradient in round-robin order
    ``0, 1, ..., m-1, 0, ...``.  Tasks that have not been visited yet are left
    out of the aggregation.  With ``schedule`` set, the step size at global
    step ``t`` is ``schedule(t - 1)``; otherwise ``hyper.lr`` is used.
    """

    def __init__(
        self,
        theta,
        m: int,
        hyper: AdamHyper | None = None,
        schedule: LRSchedule | None = None,
        mer_cfg: MerConfig | None = None,
        tol: NumericTolerances | None = None,
    ):
        if m < 1:
            raise InvalidInputError("need at least one task")
        self.hyper = hyper or AdamHyper()
        self.schedule = schedule
        self.mer_cfg = mer_cfg or MerConfig()
        self.tol = tol or NumericTolerances()
        self.state = HROptimizerState.fresh(theta, m)

    @property
    def theta(self) -> np.ndarray:
        return self.state.theta

    @property
    def next_task(self) -> int:
        return self.state.global_t % self.state.m

    def learning_rate(self, i: int) -> float:
        return self.schedule(i) if self.schedule is not None else self.hyper.lr

    def reset(self) -> None:
        s = self.state
        self.state = HROptimizerState.fresh(s.theta, s.m)

    def step(self, gradient, task_index: int | None = None, loss_snapshot=None) -> StepReport:
        s, h = self.state, self.hyper
        i = self.next_task
        if task_index is not None and int(task_index) != i:
            raise ContractError(f"expected gradient of task {i}, got task {task_index}")
        g = np.asarray(gradient, dtype=float).ravel()
        if g.shape != s.theta.shape:
            raise InvalidInputError(f"gradient has {g.size} entries, parameters have {s.theta.size}")
        if not np.all(np.isfinite(g)):
            raise InvalidInputError("gradient contains NaN or Inf")
        history = None
        if loss_snapshot is not None:
            curr = np.asarray(loss_snapshot, dtype=float)
            if curr.shape != (s.m,):
                raise InvalidInputError(f"loss snapshot must have {s.m} entries")
            history = (s.prev_losses, curr)

        s.task_t[i] += 1
        s.task_m[i] = h.beta1 * s.task_m[i] + (1.0 - h.beta1) * g
        active = np.flatnonzero(s.task_t > 0)
        corr = 1.0 - h.beta1 ** s.task_t[active].astype(float)
        m_hat = (s.task_m[active] / corr[:, None]).T

        t = s.global_t + 1
        sub_history = None
        if history is not None:
            prev = None if history[0] is None else history[0][active]
            sub_history = (prev, history[1][active])
        res = hrgrad(GradientSet(m_hat), self.mer_cfg, self.tol, loss_history=sub_history)
        direction = res.update

        g_c = (direction * (1.0 - h.beta1**t) - h.beta1 * s.shared_m) / (1.0 - h.beta1)
        s.shared_m = h.beta1 * s.shared_m + (1.0 - h.beta1) * g_c
        s.shared_v = h.beta2 * s.shared_v + (1.0 - h.beta2) * g_c * g_c
        v_hat = s.shared_v / (1.0 - h.beta2**t)
        lr = self.learning_rate(t - 1)
        s.theta = s.theta - lr * direction / (np.sqrt(v_hat) + h.eps)
        s.global_t = t
        if history is not None:
            s.prev_losses = history[1].copy()

        angles = np.zeros(s.m)
        angles[active] = res.angles
        return StepReport(
            task=i,
            t=t,
            lr=lr,
            direction=direction,
            s_c=res.s_c,
            angles=angles,
            conflicts=[int(active[k]) for k in res.conflicts],
            degenerate=res.degenerate,
            active=active.tolist(),
        )

    def state_json(self) -> str:
        return json.dumps(self.state.to_dict())

    def load_state_json(self, text: str) -> None:
        st = HROptimizerState.from_dict(json.loads(text))
        if st.theta.shape != self.state.theta.shape or st.m != self.state.m:
            raise InvalidInputError("checkpoint shape does not match this optimizer")
        self.state = st

