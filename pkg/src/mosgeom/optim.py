"""Split-group optimizer: curvature and capacity parameters step separately.

Each group owns its learning-rate schedule, update rule, weight decay, and
moment state. Because every update touches only its own parameter, stepping
both groups together is coordinate-wise identical to stepping each group
alone with the other's learning rate at zero, and collapsing everything into
one group with shared hyperparameters reproduces a unified optimizer
bit-for-bit.
"""
from dataclasses import dataclass, field

import numpy as np

BETA1, BETA2 = 0.9, 0.999
ADAM_EPS = 1e-8
KINDS = ("adamw", "sgd")


class OptimError(Exception):
    pass


class NonFiniteGradient(OptimError):
    """Raised before any parameter is touched; the step is rejected."""

    def __init__(self, names):
        self.names = tuple(names)
        super().__init__(f"non-finite gradient for {', '.join(self.names)}")


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 to base_lr, then linear decay to 0."""

    base_lr: float
    warmup_ratio: float = 0.1
    total_steps: int = 1000

    def __post_init__(self):
        if self.base_lr < 0 or not 0 <= self.warmup_ratio < 1:
            raise OptimError("bad schedule")
        if self.total_steps < 1:
            raise OptimError("total_steps must be positive")

    def lr(self, step):
        warm = self.warmup_ratio * self.total_steps
        if self.warmup_ratio > 0 and step < warm:
            return self.base_lr * step / warm
        rest = self.total_steps - warm
        if rest <= 0:
            return self.base_lr if step <= warm else 0.0
        return max(self.base_lr * (self.total_steps - step) / rest, 0.0)


@dataclass(frozen=True)
class GroupSettings:
    schedule: Schedule
    kind: str = "adamw"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OptimError(f"unknown optimizer kind {self.kind!r}")


@dataclass
class OptGroup:
    names: tuple
    schedule: Schedule
    kind: str
    weight_decay: float
    state: dict = field(default_factory=dict)  # name -> {m, v, t}

    def _state_for(self, name, value):
        if name not in self.state:
            self.state[name] = {"m": np.zeros_like(value),
                                "v": np.zeros_like(value), "t": 0}
        return self.state[name]


@dataclass
class ParamGroups:
    curvature_group: OptGroup
    capacity_group: OptGroup

    def groups(self):
        return (self.curvature_group, self.capacity_group)

    def all_names(self):
        return self.curvature_group.names + self.capacity_group.names


def partition(handles, capacity, curvature):
    """Split (name, kind-tag) handles into the two optimizer groups.

    Every handle must be tagged 'curvature' or 'capacity'; a name appearing
    twice or carrying an unknown tag is an error, so the groups always form
    a disjoint exhaustive partition of the trainable parameters.
    """
    seen = set()
    names = {"curvature": [], "capacity": []}
    for name, tag in handles:
        if name in seen:
            raise OptimError(f"parameter {name!r} tagged twice")
        seen.add(name)
        if tag not in names:
            raise OptimError(f"parameter {name!r} has unknown tag {tag!r}")
        names[tag].append(name)
    return ParamGroups(
        curvature_group=OptGroup(tuple(names["curvature"]),
                                 curvature.schedule, curvature.kind,
                                 curvature.weight_decay),
        capacity_group=OptGroup(tuple(names["capacity"]), capacity.schedule,
                                capacity.kind, capacity.weight_decay))


def default_groups(handles, base_lr=3e-4, total_steps=1000, warmup_ratio=0.1,
                   weight_decay=0.01, curvature_lr_scale=10.0):
    """Paper-style defaults: AdamW both groups, decoupled decay on capacity
    only, curvature at a multiple of the capacity rate."""
    cap = GroupSettings(Schedule(base_lr, warmup_ratio, total_steps),
                        "adamw", weight_decay)
    cur = GroupSettings(Schedule(base_lr * curvature_lr_scale, warmup_ratio,
                                 total_steps), "adamw", 0.0)
    return partition(handles, capacity=cap, curvature=cur)


def _apply(group, name, w, g, lr):
    wd = group.weight_decay
    if group.kind == "sgd":
        return w - lr * (g + wd * w)
    st = group._state_for(name, w)
    st["t"] += 1
    t = st["t"]
    st["m"] = BETA1 * st["m"] + (1.0 - BETA1) * g
    st["v"] = BETA2 * st["v"] + (1.0 - BETA2) * (g * g)
    mhat = st["m"] / (1.0 - BETA1 ** t)
    vhat = st["v"] / (1.0 - BETA2 ** t)
    return w - lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + wd * w)


def step(groups, params, grads, step_index):
    """Apply one update to every parameter, each by its own group's rule.

    All gradients are validated before anything is written, so a rejected
    step leaves parameters and moment state untouched.
    """
    bad = []
    for group in groups.groups():
        for name in group.names:
            if name not in params:
                raise OptimError(f"no parameter value for {name!r}")
            if name not in grads:
                raise OptimError(f"missing gradient for {name!r}")
            if not np.all(np.isfinite(grads[name])):
                bad.append(name)
    if bad:
        raise NonFiniteGradient(bad)
    for group in groups.groups():
        lr = group.schedule.lr(step_index)
        for name in group.names:
            g = np.asarray(grads[name], dtype=np.float64)
            params[name] = _apply(group, name, params[name], g, lr)
    return params
