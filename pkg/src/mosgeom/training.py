"""Desk-scale training harness around the expert layer.

Model: input -> (frozen W1 + routed expert deltas) -> tanh -> linear
readout. Objective: cross-entropy plus the weighted balance loss. Curvature
and capacity parameters step through their own optimizer groups. Every step
is logged; curvature snapshots are taken after the update so the dump shows
the trajectories. All randomness flows from one generator seeded at entry,
so (seed, config) fully determines the record stream, the trajectory file
bytes, and the checkpoint bytes.
"""
import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NaNGradientError
from .checkpoint import save_checkpoint
from .geometry import Curvature
from .layer import (GROUP_TAGS, LayerConfig, init_experts, layer_forward,
                    layer_graph, layer_param_template)
from .optim import (GroupSettings, NonFiniteGradient, Schedule, partition,
                    step)


class TrainingError(Exception):
    pass


@dataclass
class ModelConfig:
    hidden: int = 64
    batch_size: int = 32
    base_lr: float = 3e-3
    curvature_lr_scale: float = 10.0
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1


@dataclass
class TrainRecord:
    step: int
    loss: float
    aux_loss: float
    curvatures: tuple
    per_group_dispatch: tuple
    eval_accuracy: float = None


@dataclass
class TrainState:
    task: object
    layer_config: LayerConfig
    model_config: ModelConfig
    frozen_w1: np.ndarray
    experts: list
    params: dict
    kinds: dict
    groups: object
    aborted: bool = False

    def synced_experts(self):
        """Expert objects refreshed from the live parameter values."""
        out = []
        for i, e in enumerate(self.experts):
            kappa = e.curvature.kappa
            if e.curvature.learnable:
                kappa = float(self.params[f"kappa{i}"])
            out.append(dataclasses.replace(
                e, A=self.params[f"A{i}"], B=self.params[f"B{i}"],
                curvature=dataclasses.replace(e.curvature, kappa=kappa)))
        return out


def build_state(task, layer_config, model_config, seed):
    rng = np.random.default_rng(seed)
    mc = model_config
    frozen_w1 = rng.normal(size=(mc.hidden, task.dim)) / np.sqrt(task.dim)
    experts, router = init_experts(layer_config, rng)
    w_out = rng.normal(size=(task.n_classes, mc.hidden)) / np.sqrt(mc.hidden)
    b_out = np.zeros(task.n_classes)
    template = layer_param_template(experts, router)
    params = {k: np.array(v, dtype=np.float64) for k, (v, _) in
              template.items()}
    kinds = {k: kind for k, (_, kind) in template.items()}
    params["w_out"], kinds["w_out"] = w_out, "capacity"
    params["b_out"], kinds["b_out"] = b_out, "capacity"
    return frozen_w1, experts, params, kinds, rng


def _forward_tape(state, xb, yb):
    tape = ad.Tape()
    lvars = {k: tape.var(np.asarray(v, dtype=np.float64), name=k,
                         kind=state.kinds[k])
             for k, v in state.params.items()}
    out, aux, decision = layer_graph(tape, lvars, xb, state.frozen_w1,
                                     state.experts, state.layer_config,
                                     mode="train")
    h = ad.tanh(out)
    logits = ad.add(ad.linmap(lvars["w_out"], h), lvars["b_out"])
    task_loss = ad.cross_entropy(logits, yb)
    total = ad.add(task_loss, ad.scale(aux, state.layer_config.
                                       aux_coefficient))
    return tape, total, aux, decision


def evaluate(state, features, labels):
    """Accuracy of the current parameters on (features, labels)."""
    experts = state.synced_experts()
    out = layer_forward(features, state.frozen_w1, experts,
                        state.layer_config, state.params["router"],
                        mode="train")
    h = np.tanh(out.output)
    logits = np.einsum("ch,bh->bc", state.params["w_out"], h,
                       optimize=False) + state.params["b_out"]
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _snapshot(state, gstep, total, aux, decision, batch_slots):
    kappas = []
    for i, e in enumerate(state.experts):
        if e.curvature.learnable:
            kappas.append(float(state.params[f"kappa{i}"]))
        else:
            kappas.append(float(e.curvature.kappa))
    dispatch = tuple(decision.group_stats[tag].count / batch_slots
                     for tag in GROUP_TAGS)
    return TrainRecord(step=gstep, loss=float(total.data),
                       aux_loss=float(aux.data), curvatures=tuple(kappas),
                       per_group_dispatch=dispatch)


def run_training(task, model_config=None, layer_config=None, schedule=None,
                 epochs=3, seed=7):
    """Full training run; returns (records, final state)."""
    if epochs < 1:
        raise TrainingError("epochs must be >= 1")
    mc = model_config or ModelConfig()
    lc = layer_config or LayerConfig(d_in=task.dim, d_out=mc.hidden)
    if lc.d_in != task.dim or lc.d_out != mc.hidden:
        raise TrainingError("layer dims do not match task/model")
    frozen_w1, experts, params, kinds, rng = build_state(task, lc, mc, seed)
    xtr, ytr, xte, yte = task.split()
    bs = min(mc.batch_size, len(xtr))
    steps_per_epoch = max(1, len(xtr) // bs)
    total_steps = epochs * steps_per_epoch
    cap_sched = schedule or Schedule(mc.base_lr, mc.warmup_ratio,
                                     total_steps)
    cur_sched = Schedule(cap_sched.base_lr * mc.curvature_lr_scale,
                         cap_sched.warmup_ratio, cap_sched.total_steps)
    groups = partition(
        [(k, kinds[k]) for k in params],
        capacity=GroupSettings(cap_sched, "adamw", mc.weight_decay),
        curvature=GroupSettings(cur_sched, "adamw", 0.0))
    state = TrainState(task, lc, mc, frozen_w1, experts, params, kinds,
                       groups)
    records = []
    gstep = 0
    for _ in range(epochs):
        order = rng.permutation(len(xtr))
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            tape, total, aux, decision = _forward_tape(state, xtr[idx],
                                                       ytr[idx])
            if not np.isfinite(float(total.data)):
                state.aborted = True
                return records, state
            try:
                grads = ad.backward(tape, total)
            except NaNGradientError:
                state.aborted = True
                return records, state
            for name in params:
                if name not in grads:
                    grads[name] = np.zeros_like(params[name])
            try:
                step(groups, params, grads, gstep)
            except NonFiniteGradient:
                state.aborted = True
                return records, state
            records.append(_snapshot(state, gstep, total, aux, decision,
                                     len(idx) * lc.top_k))
            gstep += 1
        records[-1].eval_accuracy = evaluate(state, xte, yte)
    return records, state


def train(task, model_config=None, layer_config=None, schedule=None,
          epochs=3, seed=7, checkpoint_path=None, trajectory_path=None):
    """Train and optionally persist the trajectory file and checkpoint."""
    records, state = run_training(task, model_config, layer_config, schedule,
                                  epochs, seed)
    if trajectory_path is not None:
        dump_trajectories(records, trajectory_path)
    if checkpoint_path is not None:
        save_state(state, checkpoint_path)
    return records


def save_state(state, path):
    opt_state = {}
    for group in state.groups.groups():
        opt_state.update(group.state)
    extras = {"w_out": state.params["w_out"],
              "b_out": state.params["b_out"],
              "frozen_w1": state.frozen_w1}
    save_checkpoint(path, state.layer_config, state.synced_experts(),
                    state.params["router"], extras=extras,
                    opt_state=opt_state or None)


def dump_trajectories(records, path):
    """One comma-separated row per step; floats keep full precision."""
    if not records:
        raise TrainingError("no records to dump")
    n = len(records[0].curvatures)
    header = (["step", "loss", "aux_loss"] +
              [f"kappa{i}" for i in range(n)] +
              [f"dispatch_{tag}" for tag in GROUP_TAGS] +
              ["eval_accuracy"])
    lines = [",".join(header)]
    last = -1
    for rec in records:
        if rec.step <= last:
            raise TrainingError("steps must strictly increase")
        if not np.isfinite(rec.loss):
            raise TrainingError("non-finite loss in records")
        last = rec.step
        row = ([str(rec.step), repr(rec.loss), repr(rec.aux_loss)] +
               [repr(k) for k in rec.curvatures] +
               [repr(d) for d in rec.per_group_dispatch] +
               ["" if rec.eval_accuracy is None else
                repr(rec.eval_accuracy)])
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_trajectories(path):
    """Parse a trajectory dump back into records (exact round-trip)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    n = sum(1 for h in header if h.startswith("kappa"))
    records = []
    for ln in lines[1:]:
        cells = ln.split(",")
        records.append(TrainRecord(
            step=int(cells[0]), loss=float(cells[1]),
            aux_loss=float(cells[2]),
            curvatures=tuple(float(c) for c in cells[3:3 + n]),
            per_group_dispatch=tuple(float(c)
                                     for c in cells[3 + n:6 + n]),
            eval_accuracy=None if cells[6 + n] == "" else
            float(cells[6 + n])))
    return records
