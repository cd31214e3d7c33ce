"""Binary checkpoint container for the expert layer and optimizer state.

Little-endian throughout, version byte up front. Layout:

    magic  b"MOSL", version u8
    header d_in u32, d_out u32, rank u32, n_experts u32, top_k u32,
           gamma f64, epsilon_zero f64, aux_coefficient f64
    tags   n_experts bytes (0 hyperbolic, 1 spherical, 2 euclidean)
    learn  n_experts bytes (1 if the curvature is learnable)
    router f64[n_experts * d_in], then per expert A_i f64[rank * d_in]
           and B_i f64[d_out * rank], then kappa f64[n_experts]
    extras u32 count, then per array: u16 name length, utf-8 name,
           u8 ndim, u32 dims, f64 data (named caller arrays, e.g. readout)
    opt    u8 flag; if 1: u32 count, then per entry: name, u64 step count,
           shape, f64 moments m then v

Writing the same state twice produces identical bytes, so checkpoint files
can be compared byte-for-byte across runs.
"""
import struct

import numpy as np

from .geometry import Curvature
from .layer import GROUP_TAGS, ExpertParams, LayerConfig

MAGIC = b"MOSL"
VERSION = 1


class CheckpointError(Exception):
    pass


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f8").tobytes()


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self):
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").copy()
        return data.reshape(shape)


def save_checkpoint(path, config, experts, router, extras=None,
                    opt_state=None):
    """Serialize the layer (and optional named arrays / optimizer moments)."""
    out = [MAGIC, struct.pack("<B", VERSION)]
    out.append(struct.pack("<5I", config.d_in, config.d_out, config.rank,
                           config.n_experts, config.top_k))
    out.append(struct.pack("<3d", config.gamma, config.epsilon_zero,
                           config.aux_coefficient))
    out.append(bytes(GROUP_TAGS.index(e.group_tag) for e in experts))
    out.append(bytes(int(e.curvature.learnable) for e in experts))
    out.append(_pack_array(router))
    for e in experts:
        out.append(_pack_array(e.A))
        out.append(_pack_array(e.B))
    out.append(_pack_array(np.array([e.curvature.kappa for e in experts])))
    extras = extras or {}
    out.append(struct.pack("<I", len(extras)))
    for name in sorted(extras):
        out.append(_pack_name(name))
        out.append(_pack_array(extras[name]))
    if opt_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<I", len(opt_state)))
        for name in sorted(opt_state):
            st = opt_state[name]
            out.append(_pack_name(name))
            out.append(struct.pack("<Q", int(st["t"])))
            out.append(_pack_array(st["m"]))
            out.append(_pack_array(st["v"]))
    blob = b"".join(out)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path):
    """Read a container back into (config, experts, router, extras, opt)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a layer checkpoint")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d_in, d_out, rank, n, k = r.unpack("<5I")
    gamma, eps_zero, alpha = r.unpack("<3d")
    raw_tags = r.take(n)
    if any(b >= len(GROUP_TAGS) for b in raw_tags):
        raise CheckpointError("bad group tag byte")
    tags = [GROUP_TAGS[b] for b in raw_tags]
    learnable = [bool(b) for b in r.take(n)]
    group_sizes = tuple(tags.count(t) for t in GROUP_TAGS)
    laid_out = [t for t, size in zip(GROUP_TAGS, group_sizes)
                for _ in range(size)]
    if tags != laid_out:
        raise CheckpointError("experts are not laid out group by group")
    config = LayerConfig(d_in=d_in, d_out=d_out, n_experts=n, top_k=k,
                         group_sizes=group_sizes, rank=rank,
                         aux_coefficient=alpha, gamma=gamma,
                         epsilon_zero=eps_zero)
    router = r.array()
    factors = [(r.array(), r.array()) for _ in range(n)]
    kappas = r.array()
    experts = []
    for i in range(n):
        curv = Curvature(float(kappas[i]), learnable=learnable[i],
                         epsilon_zero=eps_zero)
        experts.append(ExpertParams(factors[i][0], factors[i][1], curv,
                                    tags[i]))
    (n_extra,) = r.unpack("<I")
    extras = {r.name(): r.array() for _ in range(n_extra)}
    (has_opt,) = r.unpack("<B")
    opt_state = None
    if has_opt:
        (n_opt,) = r.unpack("<I")
        opt_state = {}
        for _ in range(n_opt):
            name = r.name()
            (t,) = r.unpack("<Q")
            opt_state[name] = {"t": t, "m": r.array(), "v": r.array()}
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, experts, router, extras, opt_state
