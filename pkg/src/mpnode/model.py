"""The message-passing neural ODE: one shared per-node MLP over an augmented
state [x_k; m_k], mean aggregation of neighbor messages at every observation
boundary, and RK4 integration of the augmented state in between.

A rollout keeps the full system as a [B*n, d+p] block (batch-major rows) so
one fused MLP evaluation advances every node of every trajectory at once.
Aggregated messages are frozen during the four RK4 stages of a step; the
freshly integrated message component becomes the node's next outgoing
message. `rollout` (single trajectory) runs on the stable kernels and is
bit-exactly equivariant under node relabeling; `rollout_batch` favours
throughput and is equivariant up to roundoff.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import NormStats
from .dynamics import rk4_step
from .errors import CompatibilityError, DivergenceError, ShapeError
from .graphs import GraphSpec
from .rng import Rng, derive

CHECKPOINT_VERSION = 1


@dataclass
class MpNodeModel:
    state_dim: int
    message_dim: int
    control_dim: int
    hidden: tuple[int, ...]
    activation: str
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.message_dim + self.control_dim

    @property
    def output_dim(self) -> int:
        return self.state_dim + self.message_dim

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MpNodeModel":
        return MpNodeModel(
            self.state_dim, self.message_dim, self.control_dim, self.hidden,
            self.activation,
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases])


def init_model(state_dim: int, message_dim: int, control_dim: int = 0,
               hidden: tuple[int, ...] = (64, 64), activation: str = "tanh",
               seed: int = 0) -> MpNodeModel:
    """Shared per-node MLP, Glorot-uniform weights and zero biases."""
    if state_dim < 1 or message_dim < 0 or control_dim < 0:
        raise ValueError("bad model dimensions")
    if activation not in ("tanh", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    model = MpNodeModel(state_dim, message_dim, control_dim, tuple(hidden), activation)
    rng = Rng(derive(seed, 40))
    widths = [model.input_dim, *hidden, model.output_dim]
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniforms((fan_out, fan_in), -bound, bound)
        model.weights.append(Tensor(w, requires_grad=True))
        model.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return model


def mlp_forward(model: MpNodeModel, z: Tensor, stable: bool = False) -> Tensor:
    """Apply the shared MLP to a vector [d+p+c] or a row batch [N, d+p+c]."""
    if z.shape[-1] != model.input_dim:
        raise ShapeError(f"MLP input width {z.shape[-1]}, expected {model.input_dim}")
    h = z
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        act = None if i == last else model.activation
        h = ad.dense(h, w, b, activation=act, stable=stable)
    return h


def aggregate_incoming(g: GraphSpec, messages: list[Tensor], k: int) -> Tensor:
    """Incoming message for node k: unweighted mean of neighbors' outgoing
    messages, or zeros when k has no neighbors."""
    if not (0 <= k < g.n):
        raise IndexError(f"node index {k} out of range for n={g.n}")
    row = g.adjacency[k]
    neighbors = [messages[j] for j in np.nonzero(row > 0.0)[0]]
    if not neighbors:
        return Tensor(np.zeros(messages[k].shape))
    return ad.mean_over_set(neighbors)


def augmented_rhs(model: MpNodeModel, x_k: Tensor, m_in_k: Tensor,
                  u_k: Tensor | None = None, stable: bool = False) -> Tensor:
    """Time derivative of one node's augmented state [x_k; m'_k]."""
    parts = [x_k, m_in_k] if model.message_dim > 0 else [x_k]
    if model.control_dim > 0:
        if u_k is None:
            raise ShapeError("model expects a control input")
        parts.append(u_k)
    z = ad.concat(parts) if len(parts) > 1 else parts[0]
    return mlp_forward(model, z, stable=stable)


@dataclass
class AugmentedSystemState:
    """Per-node physical states x [n, d] and outgoing messages m [n, p]."""
    x: Tensor
    m: Tensor


def _system_rhs(model: MpNodeModel, stable: bool):
    def f(aug: Tensor, u: Tensor | None) -> Tensor:
        z = aug if u is None else ad.concat_cols([aug, u])
        return mlp_forward(model, z, stable=stable)
    return f


def _advance(model: MpNodeModel, mask: np.ndarray, aug: Tensor,
             u: Tensor | None, dt: float, stable: bool) -> Tensor:
    """One observation step on the [B*n, d+p] block: aggregate, integrate."""
    d, p = model.state_dim, model.message_dim
    if p > 0:
        m_in = ad.neighbor_mean(mask, ad.col_slice(aug, d, d + p), stable=stable)
        start = ad.concat_cols([ad.col_slice(aug, 0, d), m_in])
    else:
        start = aug
    try:
        return rk4_step(_system_rhs(model, stable), start, u, dt)
    except DivergenceError as err:
        detail = str(err)
        arr = getattr(err, "values", None)
        if arr is not None and arr.ndim == 2:
            n = mask.shape[0]
            rows = np.nonzero(~np.isfinite(arr).all(axis=1))[0]
            detail += f" at nodes {sorted({int(r) % n for r in rows})}"
        raise DivergenceError(detail) from err


def mpnode_step(model: MpNodeModel, g: GraphSpec, state: AugmentedSystemState,
                controls: Tensor | None, dt: float,
                stable: bool = True) -> AugmentedSystemState:
    """Advance the whole system one observation timestep.

    Aggregation happens once at the step boundary; the aggregated incoming
    message replaces the message slot, the augmented state is integrated by
    RK4 under the shared MLP, and the integrated message component becomes
    the new outgoing message.
    """
    d, p = model.state_dim, model.message_dim
    if state.x.shape != (g.n, d) or state.m.shape != (g.n, p):
        raise ShapeError("augmented state does not match graph and model dims")
    aug = ad.concat_cols([state.x, state.m]) if p > 0 else state.x
    try:
        aug = _advance(model, g.neighbor_mask(), aug, controls, dt, stable)
    except DivergenceError as err:
        raise DivergenceError(f"mpnode step diverged: {err}") from err
    return AugmentedSystemState(x=ad.col_slice(aug, 0, d),
                                m=ad.col_slice(aug, d, d + p))


def rollout_batch(model: MpNodeModel, g: GraphSpec, x0, T: int, dt: float,
                  controls: np.ndarray | None = None, clamp_messages: bool = False,
                  stable: bool = False, record_messages: bool = True
                  ) -> tuple[Tensor, Tensor | None]:
    """Roll B trajectories forward jointly; returns states [T, B, n, d] and,
    when recording, outgoing messages [T, B, n, p].

    Initial messages are zero. With `clamp_messages`, outgoing messages are
    replaced by zeros after every step, severing all information flow
    between nodes.
    """
    if T < 1:
        raise ValueError("rollout needs T >= 1")
    d, p, c = model.state_dim, model.message_dim, model.control_dim
    xt = x0 if isinstance(x0, Tensor) else Tensor(x0)
    if xt.data.ndim != 3 or xt.shape[1] != g.n or xt.shape[2] != d:
        raise ShapeError(f"x0 shape {xt.shape} does not match [B, {g.n}, {d}]")
    B = xt.shape[0]
    rows = B * g.n
    if c > 0 and (controls is None or controls.shape != (B, T, g.n, c)):
        raise ShapeError(f"controls must be [B, T, n, {c}]")
    mask = g.neighbor_mask()
    zeros_msg = Tensor(np.zeros((rows, p)))
    aug = ad.reshape(xt, (rows, d))
    if p > 0:
        aug = ad.concat_cols([aug, zeros_msg])
    states = [ad.col_slice(aug, 0, d)]
    messages = [zeros_msg] if record_messages else None
    for step in range(1, T):
        u = None
        if c > 0:
            u = Tensor(controls[:, step - 1].reshape(rows, c))
        try:
            aug = _advance(model, mask, aug, u, dt, stable)
        except DivergenceError as err:
            raise DivergenceError(f"rollout step {step}: {err}") from err
        if clamp_messages and p > 0:
            aug = ad.concat_cols([ad.col_slice(aug, 0, d), zeros_msg])
        states.append(ad.col_slice(aug, 0, d))
        if record_messages:
            messages.append(ad.col_slice(aug, d, d + p) if p > 0 else zeros_msg)
    states_t = ad.reshape(ad.stack(states), (T, B, g.n, d))
    msg_t = None
    if record_messages:
        msg_t = ad.reshape(ad.stack(messages), (T, B, g.n, p))
    return states_t, msg_t


def rollout(model: MpNodeModel, g: GraphSpec, x0, T: int, dt: float,
            controls: np.ndarray | None = None, clamp_messages: bool = False,
            stable: bool = True) -> tuple[Tensor, Tensor]:
    """Single-trajectory rollout; returns states [T, n, d] and messages [T, n, p].

    Runs on the stable kernels by default, making the result bit-exactly
    equivariant under node permutation.
    """
    xt = x0 if isinstance(x0, Tensor) else Tensor(x0)
    if xt.data.ndim != 2:
        raise ShapeError(f"x0 must be [n, d], got {xt.shape}")
    batched = ad.reshape(xt, (1, *xt.shape))
    ctl = None if controls is None else controls[None]
    states, messages = rollout_batch(model, g, batched, T, dt, controls=ctl,
                                     clamp_messages=clamp_messages, stable=stable,
                                     record_messages=True)
    d, p = model.state_dim, model.message_dim
    return (ad.reshape(states, (T, g.n, d)), ad.reshape(messages, (T, g.n, p)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: MpNodeModel
    norm: NormStats | None
    provenance: dict
    format_version: int = CHECKPOINT_VERSION


def _checkpoint_header(ckpt: Checkpoint) -> dict:
    m = ckpt.model
    norm = None
    if ckpt.norm is not None:
        norm = {"mean": list(ckpt.norm.mean), "std": list(ckpt.norm.std),
                "floored_dims": list(ckpt.norm.floored)}
    return {
        "format_version": ckpt.format_version,
        "d": m.state_dim, "p": m.message_dim, "c": m.control_dim,
        "hidden": list(m.hidden), "activation": m.activation,
        "norm": norm,
        "provenance": ckpt.provenance,
        "param_shapes": [list(t.shape) for t in m.parameters()],
    }


def checkpoint_hash(ckpt: Checkpoint) -> str:
    h = hashlib.sha256(json.dumps(_checkpoint_header(ckpt), sort_keys=True).encode())
    for t in ckpt.model.parameters():
        h.update(t.data.astype("<f8").tobytes("C"))
    return h.hexdigest()


def save_checkpoint(model: MpNodeModel, norm: NormStats | None, provenance: dict,
                    path) -> Checkpoint:
    """Write a checkpoint file: one JSON header line, then raw float64 blocks
    in declared layer order (W1, b1, W2, b2, ...)."""
    ckpt = Checkpoint(model=model, norm=norm, provenance=dict(provenance))
    header = json.dumps(_checkpoint_header(ckpt))
    if "\n" in header:
        raise ValueError("checkpoint header must be a single line")
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        for t in model.parameters():
            fh.write(t.data.astype("<f8").tobytes("C"))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(
            f"unsupported checkpoint format version {header.get('format_version')}")
    shapes = [tuple(s) for s in header["param_shapes"]]
    blob = np.frombuffer(raw[nl + 1:], dtype="<f8")
    expect = sum(int(np.prod(s)) for s in shapes)
    if blob.size != expect:
        raise CompatibilityError(f"checkpoint holds {blob.size} values, expected {expect}")
    model = MpNodeModel(header["d"], header["p"], header["c"],
                        tuple(header["hidden"]), header["activation"])
    offset = 0
    for w_shape, b_shape in zip(shapes[0::2], shapes[1::2]):
        w_n = int(np.prod(w_shape))
        model.weights.append(Tensor(blob[offset:offset + w_n].reshape(w_shape).copy(),
                                    requires_grad=True))
        offset += w_n
        b_n = int(np.prod(b_shape))
        model.biases.append(Tensor(blob[offset:offset + b_n].reshape(b_shape).copy(),
                                   requires_grad=True))
        offset += b_n
    norm = None
    if header["norm"] is not None:
        norm = NormStats(mean=np.asarray(header["norm"]["mean"]),
                         std=np.asarray(header["norm"]["std"]),
                         floored=tuple(header["norm"]["floored_dims"]))
    return Checkpoint(model=model, norm=norm, provenance=header["provenance"])
