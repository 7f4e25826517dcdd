"""Loss, optimizers and learning-rate schedules."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

P_CLAMP = 1e-7


class TrainingAborted(RuntimeError):
    """Non-finite gradients or loss; carries a diagnostic message."""


def bce_loss(p, y):
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_grad(p, y):
    """d(mean BCE)/dp; zero where the clamp is active."""
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    g = (pc - y) / (pc * (1.0 - pc)) / p.shape[0]
    return np.where((p > P_CLAMP) & (p < 1.0 - P_CLAMP), g, 0.0).astype(p.dtype)


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class StepLR:
    gamma: float = 0.1
    step_epochs: int = 50

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.step_epochs < 1:
            raise ValueError("step_epochs must be >= 1")

    def lr_at(self, base_lr, epoch):
        """Learning rate in effect once ``epoch`` epochs have completed."""
        return base_lr * self.gamma ** (epoch // self.step_epochs)

    def label(self):
        return f"StepLR({self.gamma:g})"


@dataclass(frozen=True)
class Plateau:
    factor: float = 0.1
    patience: int = 10
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")

    def label(self):
        return "Plateau"


class PlateauTracker:
    """Multiplies the rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, spec: Plateau):
        self.spec = spec
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, lr, metric):
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs > self.spec.patience:
            self.bad_epochs = 0
            return max(lr * self.spec.factor, self.spec.min_lr)
        return lr


def schedule_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    return {"StepLR": StepLR, "Plateau": Plateau}[kind](**d)


def schedule_to_dict(s):
    return {"kind": type(s).__name__, **asdict(s)}


# ---------------------------------------------------------------- optimizers

OPTIMIZERS = ("Adam", "SGD", "SGDMomentum")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "Adam"
    learning_rate: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: StepLR | Plateau = field(default_factory=StepLR)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = schedule_to_dict(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = schedule_from_dict(d["schedule"])
        return cls(**d)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    lr: float
    epoch: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator | None = None

    @classmethod
    def create(cls, params, spec: OptimizerSpec, seed=0):
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()} if spec.kind == "Adam" else {}
        return cls(params=params, lr=spec.learning_rate, m=m, v=v, rng=np.random.default_rng(seed))


def check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingAborted(f"non-finite gradient in {name} ({bad} entries)")


def optimizer_step(state: TrainState, grads, spec: OptimizerSpec) -> TrainState:
    """Apply one update in place to ``state.params`` and return the state."""
    check_finite(grads)
    state.step += 1
    lr = state.lr
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if spec.kind == "SGD":
            p -= lr * g
        elif spec.kind == "SGDMomentum":
            m = state.m[name]
            m *= spec.momentum
            m += g
            p -= lr * m
        else:
            m, v = state.m[name], state.v[name]
            m *= spec.beta1
            m += (1.0 - spec.beta1) * g
            v *= spec.beta2
            v += (1.0 - spec.beta2) * g * g
            m_hat = m / (1.0 - spec.beta1 ** state.step)
            v_hat = v / (1.0 - spec.beta2 ** state.step)
            p -= (lr * m_hat / (np.sqrt(v_hat) + spec.eps)).astype(p.dtype)
    return state
