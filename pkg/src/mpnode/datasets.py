"""Trajectory dataset generation, Z-score normalization, and persistence.

A dataset directory holds:

* ``manifest.json``  - shapes, system parameters, graph metadata, norm stats
* ``data.bin``       - little-endian float64, row-major [traj, time, node, dim]
* ``adjacency.bin``  - concatenated row-major n*n float64 matrices
* ``controls.bin``   - only when control width c > 0, layout like data.bin

Save/load round-trips bit-exactly. Normalized data is stored normalized and
the manifest carries the stats that invert it.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dynamics
from .dynamics import SystemSpec, simulate_trajectory, steps_for
from .errors import CompatibilityError, DivergenceError, DomainError, ShapeError
from .graphs import GraphSpec
from .rng import Rng, derive

FORMAT_VERSION = 1
STD_FLOOR = 1e-8

INIT_RANGES = {
    # per-dimension uniform sampling ranges for initial states
    "pendulum": ((-np.pi / 2, np.pi / 2), (-1.0, 1.0)),
    "lorenz": ((-10.0, 10.0),) * 3,
    "gene": ((0.0, 50.0),),
    "kuramoto": ((-1.0, 1.0),),
}


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    floored: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if (self.std <= 0).any():
            raise ValueError("normalization std must be positive")


@dataclass
class TrajectorySet:
    data: np.ndarray                    # [n_traj, T, n_nodes, d]
    dt: float
    system: SystemSpec
    graphs: list[GraphSpec]
    adjacency_index: np.ndarray         # [n_traj] int, graph index per trajectory
    controls: np.ndarray                # [n_traj, T, n_nodes, c], c may be 0
    norm: NormStats | None = None
    seed: int = 0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] < 2:
            raise ShapeError("trajectory data must be [traj, time>=2, node, dim]")
        if not np.isfinite(self.data).all():
            raise ValueError("trajectory data contains non-finite values")
        if len(self.adjacency_index) != self.n_traj:
            raise ShapeError("adjacency index must tag every trajectory")

    @property
    def n_traj(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.data.shape[2]

    @property
    def d(self) -> int:
        return self.data.shape[3]

    @property
    def c(self) -> int:
        return self.controls.shape[3]

    @property
    def graph(self) -> GraphSpec:
        return self.graphs[0]

    def graph_of(self, traj: int) -> GraphSpec:
        return self.graphs[int(self.adjacency_index[traj])]

    def subset(self, indices) -> "TrajectorySet":
        idx = np.asarray(indices)
        return TrajectorySet(
            data=self.data[idx].copy(),
            dt=self.dt,
            system=self.system,
            graphs=self.graphs,
            adjacency_index=self.adjacency_index[idx].copy(),
            controls=self.controls[idx].copy(),
            norm=self.norm,
            seed=self.seed,
        )


def sample_initial_states(sys: SystemSpec, n_nodes: int, seed: int) -> np.ndarray:
    """Uniform per-system initial states, [n_nodes, d], node-major draw order."""
    ranges = INIT_RANGES[sys.kind]
    rng = Rng(derive(seed, 20))
    out = np.empty((n_nodes, sys.state_dim))
    for node in range(n_nodes):
        for dim, (lo, hi) in enumerate(ranges):
            out[node, dim] = rng.uniform_range(lo, hi)
    return out


def generate_dataset(sys: SystemSpec, graphs: GraphSpec | list[GraphSpec],
                     n_traj: int, horizon: float, dt: float, seed: int,
                     threads: int = 1) -> TrajectorySet:
    """Simulate n_traj trajectories; graphs are assigned round-robin.

    Each trajectory draws from its own stream derived from (seed, index), so
    results do not depend on execution order or thread count. Initial
    conditions whose fixed-step simulation leaves the finite domain (the
    pendulum can reach its +-pi/2 singularity from inside its sampling
    range) are redrawn from the next derived stream, up to 50 attempts.
    """
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    if isinstance(graphs, GraphSpec):
        graphs = [graphs]
    if not graphs:
        raise ValueError("need at least one graph")
    n = graphs[0].n
    if any(g.n != n for g in graphs):
        raise ShapeError("all adjacencies in a dataset must share the node count")
    if sys.kind != "pendulum" and sys.n_nodes != n:
        raise CompatibilityError(f"system has {sys.n_nodes} nodes, graphs have {n}")
    steps = steps_for(horizon, dt)
    T = steps + 1
    systems = [sys.with_coupling(g) for g in graphs]
    adjacency_index = np.array([i % len(graphs) for i in range(n_traj)], dtype=np.int64)
    data = np.empty((n_traj, T, n, sys.state_dim))

    def run(i: int) -> None:
        s = systems[adjacency_index[i]]
        last = None
        for attempt in range(50):
            x0 = sample_initial_states(s, n, derive(seed, 0, i, attempt))
            try:
                data[i] = simulate_trajectory(s, x0, horizon, dt)
                return
            except (DomainError, DivergenceError) as err:
                last = err
        raise DivergenceError(f"trajectory {i}: no finite trajectory in 50 draws ({last})")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(n_traj)))
    else:
        for i in range(n_traj):
            run(i)
    controls = np.zeros((n_traj, T, n, sys.control_dim))
    return TrajectorySet(data=data, dt=dt, system=sys, graphs=list(graphs),
                         adjacency_index=adjacency_index, controls=controls, seed=seed)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def zscore_fit(ts: TrajectorySet) -> NormStats:
    """Per-dimension mean and sample std pooled over trajectories, time, nodes."""
    if ts.norm is not None:
        raise ValueError("dataset is already normalized")
    flat = ts.data.reshape(-1, ts.d)
    if flat.shape[0] < 2:
        raise ValueError("need at least two pooled samples to fit normalization")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0, ddof=1)
    floored = tuple(int(i) for i in np.nonzero(std < STD_FLOOR)[0])
    std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean, std=std, floored=floored)


def zscore_apply(ts: TrajectorySet, norm: NormStats) -> TrajectorySet:
    if ts.norm is not None:
        raise ValueError("dataset is already normalized")
    data = (ts.data - norm.mean) / norm.std
    return replace(ts, data=data, norm=norm)


def zscore_invert(ts: TrajectorySet, norm: NormStats) -> TrajectorySet:
    data = ts.data * norm.std + norm.mean
    return replace(ts, data=data, norm=None)


def split_train_val(ts: TrajectorySet, fraction: float, seed: int
                    ) -> tuple[TrajectorySet, TrajectorySet]:
    """Random trajectory-level split; normalization is fitted on the train side
    only and applied to both."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    if ts.norm is not None:
        raise ValueError("split expects un-normalized data")
    order = Rng(derive(seed, 30)).permutation(ts.n_traj)
    n_train = int(round(ts.n_traj * fraction))
    if n_train < 1 or n_train >= ts.n_traj:
        raise ValueError(f"split of {ts.n_traj} at {fraction} leaves an empty side")
    train = ts.subset(order[:n_train])
    val = ts.subset(order[n_train:])
    norm = zscore_fit(train)
    return zscore_apply(train, norm), zscore_apply(val, norm)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _system_params_dict(sys: SystemSpec) -> dict:
    p = sys.params
    if sys.kind == "pendulum":
        return {"m1": p.m1, "m2": p.m2, "l1": p.l1, "l2": p.l2, "k": p.k, "g": p.g}
    if sys.kind == "lorenz":
        return {"sigma": p.sigma, "rho": p.rho, "beta": p.beta}
    if sys.kind == "gene":
        return {"b": list(p.b), "g_exp": p.g_exp, "h_exp": p.h_exp}
    return {"b": list(p.b)}


def _system_from_dict(kind: str, params: dict, n_nodes: int, graph: GraphSpec) -> SystemSpec:
    if kind == "pendulum":
        return SystemSpec(kind, dynamics.PendulumParams(**params), 2)
    if kind == "lorenz":
        return SystemSpec(kind, dynamics.LorenzParams(
            params["sigma"], params["rho"], params["beta"], coupling=graph), n_nodes)
    if kind == "gene":
        return SystemSpec(kind, dynamics.GeneParams(
            b=np.asarray(params["b"]), g_exp=params["g_exp"], h_exp=params["h_exp"],
            coupling=graph), n_nodes)
    if kind == "kuramoto":
        return SystemSpec(kind, dynamics.KuramotoParams(
            b=np.asarray(params["b"]), coupling=graph), n_nodes)
    raise CompatibilityError(f"unsupported system kind {kind!r}")


def manifest_dict(ts: TrajectorySet) -> dict:
    graphs_meta = []
    offset = 0
    for g in ts.graphs:
        graphs_meta.append({"n": g.n, "topology_tag": g.topology_tag,
                            "seed": g.seed, "adjacency_offset": offset})
        offset += g.n * g.n
    norm = None
    if ts.norm is not None:
        norm = {"mean": list(ts.norm.mean), "std": list(ts.norm.std),
                "floored_dims": list(ts.norm.floored)}
    return {
        "format_version": FORMAT_VERSION,
        "system": {"kind": ts.system.kind, "params": _system_params_dict(ts.system)},
        "graphs": graphs_meta,
        "n_traj": ts.n_traj,
        "T": ts.T,
        "n_nodes": ts.n_nodes,
        "d": ts.d,
        "c": ts.c,
        "dt": ts.dt,
        "seed": ts.seed,
        "norm": norm,
        "adjacency_index_per_traj": [int(i) for i in ts.adjacency_index],
    }


def dataset_hash(ts: TrajectorySet) -> str:
    """Stable fingerprint of a dataset's manifest."""
    payload = json.dumps(manifest_dict(ts), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def save_dataset(ts: TrajectorySet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(manifest_dict(ts), indent=1))
    (path / "data.bin").write_bytes(ts.data.astype("<f8").tobytes("C"))
    adj = np.concatenate([g.adjacency.reshape(-1) for g in ts.graphs])
    (path / "adjacency.bin").write_bytes(adj.astype("<f8").tobytes("C"))
    if ts.c > 0:
        (path / "controls.bin").write_bytes(ts.controls.astype("<f8").tobytes("C"))


def load_dataset(path) -> TrajectorySet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"unsupported dataset format version {version}")
    n_traj, T = manifest["n_traj"], manifest["T"]
    n, d, c = manifest["n_nodes"], manifest["d"], manifest["c"]
    raw = np.frombuffer((path / "data.bin").read_bytes(), dtype="<f8")
    expect = n_traj * T * n * d
    if raw.size != expect:
        raise CompatibilityError(f"data.bin holds {raw.size} values, expected {expect}")
    data = raw.reshape(n_traj, T, n, d).copy()
    adj_raw = np.frombuffer((path / "adjacency.bin").read_bytes(), dtype="<f8")
    graphs = []
    for meta in manifest["graphs"]:
        gn, off = meta["n"], meta["adjacency_offset"]
        if off + gn * gn > adj_raw.size:
            raise CompatibilityError("adjacency.bin is shorter than the manifest declares")
        graphs.append(GraphSpec(gn, adj_raw[off:off + gn * gn].reshape(gn, gn).copy(),
                                meta["topology_tag"], meta["seed"]))
    kind = manifest["system"]["kind"]
    system = _system_from_dict(kind, manifest["system"]["params"], n, graphs[0])
    if c > 0:
        ctl_raw = np.frombuffer((path / "controls.bin").read_bytes(), dtype="<f8")
        if ctl_raw.size != n_traj * T * n * c:
            raise CompatibilityError("controls.bin size mismatch")
        controls = ctl_raw.reshape(n_traj, T, n, c).copy()
    else:
        controls = np.zeros((n_traj, T, n, 0))
    norm = None
    if manifest["norm"] is not None:
        norm = NormStats(mean=np.asarray(manifest["norm"]["mean"]),
                         std=np.asarray(manifest["norm"]["std"]),
                         floored=tuple(manifest["norm"]["floored_dims"]))
    return TrajectorySet(
        data=data, dt=manifest["dt"], system=system, graphs=graphs,
        adjacency_index=np.asarray(manifest["adjacency_index_per_traj"], dtype=np.int64),
        controls=controls, norm=norm, seed=manifest["seed"])
