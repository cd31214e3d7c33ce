"""Mixture-of-space low-rank expert layer.

A frozen base map plus N low-rank experts, each applying its delta inside its
own curvature-kappa space (project in, update, lift, project out), composed
by top-K routing with gates renormalized over the selected experts. Load
balancing uses a grouped auxiliary loss computed within each geometry group
(hyperbolic / spherical / euclidean) on within-group renormalized
probabilities, so shifting mass between groups is not penalized.

Reduction orders are fixed (ascending expert index) and all matmuls go
through einsum without BLAS dispatch, so batched and per-token evaluation
agree bit-for-bit.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Curvature, ScalingConfig, inv_stereo, mos_lift, stereo

GROUP_TAGS = ("hyperbolic", "spherical", "euclidean")


class LayerError(Exception):
    pass


@dataclass
class ExpertParams:
    """Low-rank factors plus the expert's geometric identity.

    A: (r, d_in) random at init; B: (d_out, r) zero at init so the expert
    starts transparent. group_tag records the geometry group at init and is
    frozen for the auxiliary loss even if a learnable kappa later crosses 0.
    """

    A: np.ndarray
    B: np.ndarray
    curvature: Curvature
    group_tag: str

    def __post_init__(self):
        if self.group_tag not in GROUP_TAGS:
            raise LayerError(f"unknown group tag {self.group_tag!r}")
        if self.group_tag == "euclidean":
            if self.curvature.kappa != 0.0 or self.curvature.learnable:
                raise LayerError("euclidean experts have fixed kappa = 0")
        if self.A.shape[0] != self.B.shape[1]:
            raise LayerError("rank mismatch between A and B")


@dataclass
class LayerConfig:
    d_in: int
    d_out: int
    n_experts: int = 8
    top_k: int = 4
    group_sizes: tuple = (3, 3, 2)  # hyperbolic, spherical, euclidean
    rank: int = 8
    aux_coefficient: float = 0.01
    gamma: float = 0.001
    epsilon_zero: float = 1e-6
    hyperbolic_init: float = -1.0
    spherical_init: float = 1.0

    def __post_init__(self):
        self.group_sizes = tuple(int(g) for g in self.group_sizes)
        if sum(self.group_sizes) != self.n_experts:
            raise LayerError("group sizes must sum to n_experts")
        if not 1 <= self.top_k <= self.n_experts:
            raise LayerError("top_k must be in [1, n_experts]")

    @property
    def scaling(self):
        return ScalingConfig(self.gamma)

    def group_ids(self):
        """{tag: tuple of expert indices}, experts laid out group by group."""
        out, start = {}, 0
        for tag, size in zip(GROUP_TAGS, self.group_sizes):
            out[tag] = tuple(range(start, start + size))
            start += size
        return out


@dataclass
class GroupStat:
    """Per-group routing statistics feeding the auxiliary loss."""

    experts: tuple
    f: np.ndarray        # dispatch fraction per expert (0s when empty)
    P: np.ndarray        # mean within-group renormalized probability
    count: int           # routed token-slots
    empty: bool = False


@dataclass
class RoutingDecision:
    indices: np.ndarray  # (B, K) selected expert ids, ascending per token
    gates: np.ndarray    # (B, K) renormalized gates, sum to 1 per token
    group_stats: dict = field(default_factory=dict)
    probs: np.ndarray = None  # (B, N) full softmax (diagnostic)


@dataclass
class LayerOutput:
    output: np.ndarray
    aux_loss: float
    per_expert_token_counts: np.ndarray


def init_experts(config, rng):
    """Build the expert list and router weights for a fresh layer.

    A_i random gaussian scaled by 1/sqrt(d_in), B_i zero, curvature init
    -1 / +1 / 0 per group (euclidean fixed and non-learnable).
    """
    experts = []
    init_value = {"hyperbolic": config.hyperbolic_init,
                  "spherical": config.spherical_init, "euclidean": 0.0}
    for tag, size in zip(GROUP_TAGS, config.group_sizes):
        for _ in range(size):
            a = rng.normal(size=(config.rank, config.d_in)) / np.sqrt(config.d_in)
            b = np.zeros((config.d_out, config.rank))
            kc = Curvature(init_value[tag], learnable=(tag != "euclidean"),
                           epsilon_zero=config.epsilon_zero)
            experts.append(ExpertParams(a, b, kc, tag))
    router = rng.normal(size=(config.n_experts, config.d_in)) / np.sqrt(config.d_in)
    return experts, router


def _softmax_rows(z):
    e = np.exp(z - np.max(z, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def _topk_indices(probs, k):
    # stable argsort on -p: ties resolved toward the lowest expert index
    order = np.argsort(-probs, axis=1, kind="stable")
    return np.sort(order[:, :k], axis=1)


def _selection_mask(indices, n_experts):
    mask = np.zeros((indices.shape[0], n_experts))
    mask[np.arange(indices.shape[0])[:, None], indices] = 1.0
    return mask


def compute_group_stats(probs, indices, config):
    """Aggregate dispatch fractions and mean renormalized probabilities.

    f_i uses hard top-K slot counts; P_i averages the within-group
    renormalized softmax probabilities over all tokens.
    """
    counts = np.bincount(indices.ravel(), minlength=config.n_experts)
    stats = {}
    for tag, ids in config.group_ids().items():
        ids = np.asarray(ids, dtype=int)
        sub = probs[:, ids]
        renorm = sub / np.sum(sub, axis=1, keepdims=True)
        p_mean = np.mean(renorm, axis=0)
        c = counts[ids]
        total = int(np.sum(c))
        f = c / total if total > 0 else np.zeros(len(ids))
        stats[tag] = GroupStat(experts=tuple(int(i) for i in ids), f=f,
                               P=p_mean, count=total, empty=(total == 0))
    return stats


def route(tokens, router_weights, config):
    """Top-K routing with per-token gate renormalization.

    logits = router_weights . token, softmax over experts, keep the K most
    probable (ties to the lowest index), renormalize the kept gates to sum
    to 1, and aggregate per-group statistics.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    logits = np.einsum("nd,bd->bn", router_weights, tokens, optimize=False)
    if not np.all(np.isfinite(logits)):
        raise LayerError("non-finite router logits")
    probs = _softmax_rows(logits)
    indices = _topk_indices(probs, config.top_k)
    masked = probs * _selection_mask(indices, config.n_experts)
    norms = np.sum(masked, axis=1, keepdims=True)
    gates_full = masked / norms
    gates = gates_full[np.arange(tokens.shape[0])[:, None], indices]
    return RoutingDecision(indices=indices, gates=gates,
                           group_stats=compute_group_stats(probs, indices, config),
                           probs=probs)


def grouped_aux_loss(decision, config):
    """Mean over groups of N_g * sum_i f_i * P_i.

    Balanced routing inside a group gives the minimum 1; full concentration
    gives N_g. Groups that received no tokens contribute the minimum and are
    flagged on their GroupStat.
    """
    total = 0.0
    for tag in GROUP_TAGS:
        stat = decision.group_stats[tag]
        if stat.empty:
            total = total + 1.0
            continue
        ng = float(len(stat.experts))
        total = total + ng * float(np.sum(stat.f * stat.P))
    return total / float(len(GROUP_TAGS))


def expert_forward(token, expert, scaling, mode="train"):
    """One expert's delta for a token (or batch of tokens).

    gamma x -> inverse projection at kappa -> space-like s -> B A s ->
    lift -> projection -> 1/gamma. Flat curvature reduces to the plain
    low-rank update B A x (up to the cancelling gamma factors).
    """
    x = np.atleast_2d(np.asarray(token, dtype=np.float64))
    squeeze = np.asarray(token).ndim == 1
    g = scaling.gamma
    inv_g = 1.0 / g
    kc = expert.curvature
    u = x * g
    if kc.is_flat:
        s = u
    else:
        s = np.atleast_2d(inv_stereo(u, kc, mode).s)
    a = np.einsum("rd,bd->br", expert.A, s, optimize=False)
    delta = np.einsum("or,br->bo", expert.B, a, optimize=False)
    if kc.is_flat:
        out = delta * inv_g
    else:
        lifted = mos_lift(delta, kc, mode)
        out = np.atleast_2d(stereo(lifted, kc)) * inv_g
    return out[0] if squeeze else out


def layer_forward(tokens, frozen_w, experts, config, router_weights,
                  mode="train"):
    """Frozen path plus gate-weighted expert deltas for the routed top-K.

    Every expert is evaluated on the full batch and weighted by its gate
    column (exactly 0.0 for unselected experts), accumulated in ascending
    expert order; this keeps batched evaluation bit-identical to a per-token
    loop.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    if len(experts) != config.n_experts:
        raise LayerError("expert list does not match config")
    decision = route(tokens, router_weights, config)
    gates_full = np.zeros((tokens.shape[0], config.n_experts))
    gates_full[np.arange(tokens.shape[0])[:, None], decision.indices] = \
        decision.gates
    out = np.einsum("od,bd->bo", frozen_w, tokens, optimize=False)
    for i, expert in enumerate(experts):
        delta = expert_forward(tokens, expert, config.scaling, mode)
        out = out + gates_full[:, i:i + 1] * delta
    counts = np.bincount(decision.indices.ravel(), minlength=config.n_experts)
    return LayerOutput(output=out, aux_loss=grouped_aux_loss(decision, config),
                       per_expert_token_counts=counts)


# ------------------------------------------------------------- tape variant

def layer_param_template(experts, router_weights):
    """{name: (array, kind)} for every trainable layer parameter."""
    params = {"router": (router_weights, "capacity")}
    for i, e in enumerate(experts):
        params[f"A{i}"] = (e.A, "capacity")
        params[f"B{i}"] = (e.B, "capacity")
        if e.curvature.learnable:
            params[f"kappa{i}"] = (np.asarray(e.curvature.kappa), "curvature")
    return params


def layer_graph(tape, lvars, tokens, frozen_w, experts, config, mode="train"):
    """Record the layer forward pass on a tape.

    lvars maps parameter names (as in layer_param_template) to leaf Vars.
    Returns (output Var, aux loss Var, RoutingDecision). The top-K selection
    itself is data-dependent and enters the graph as constants; gradients
    flow through the softmax probabilities, the gates, the expert factors,
    and each learnable curvature. The recorded arithmetic mirrors
    layer_forward exactly.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    b = tokens.shape[0]
    x = tape.const(tokens)
    logits = ad.linmap(lvars["router"], x)
    probs = ad.softmax(logits)
    indices = _topk_indices(probs.data, config.top_k)
    mask = _selection_mask(indices, config.n_experts)
    masked = ad.cmul(probs, mask)
    gates_full = ad.div(masked, ad.sum_axis1(masked))
    out = ad.linmap(tape.const(frozen_w), x)
    g = config.gamma
    for i, expert in enumerate(experts):
        kc = expert.curvature
        if kc.learnable:
            kvar = lvars[f"kappa{i}"]
            flat = abs(float(kvar.data)) < kc.epsilon_zero
        else:
            kvar = None
            flat = kc.is_flat
        u = ad.scale(x, g)
        if flat:
            a = ad.linmap(lvars[f"A{i}"], u)
            delta = ad.linmap(lvars[f"B{i}"], a)
            e_out = ad.scale(delta, 1.0 / g)
        else:
            if kvar is None:  # fixed non-flat curvature
                kvar = tape.const(np.asarray(kc.kappa))
            s = ad.invstereo_s(u, kvar, mode)
            a = ad.linmap(lvars[f"A{i}"], s)
            delta = ad.linmap(lvars[f"B{i}"], a)
            xi = ad.lift_xi(delta, kvar, mode)
            e_out = ad.scale(ad.stereo_from(xi, delta, kvar), 1.0 / g)
        gate_col = ad.gather_cols(gates_full, (i,))
        out = ad.add(out, ad.mul(gate_col, e_out))
    decision = RoutingDecision(
        indices=indices,
        gates=gates_full.data[np.arange(b)[:, None], indices],
        group_stats=compute_group_stats(probs.data, indices, config),
        probs=probs.data)
    aux = _aux_graph(tape, probs, decision, config)
    return out, aux, decision


def _aux_graph(tape, probs, decision, config):
    """Tape twin of grouped_aux_loss; gradients flow through P only."""
    terms = []
    for tag in GROUP_TAGS:
        stat = decision.group_stats[tag]
        if stat.empty:
            terms.append(tape.const(np.asarray(1.0)))
            continue
        sub = ad.gather_cols(probs, stat.experts)
        renorm = ad.div(sub, ad.sum_axis1(sub))
        p_mean = ad.mean_axis0(renorm)
        ng = float(len(stat.experts))
        terms.append(ad.sum_all(ad.cmul(p_mean, ng * stat.f)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(GROUP_TAGS))
