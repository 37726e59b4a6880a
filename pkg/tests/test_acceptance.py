"""Acceptance gate: one test per criterion, run at the stated tolerances.

Each test prints one `criterion N (...): PASS - ...` line with the measured
quantities (visible with `pytest -s`). The training-based criteria share
module-scoped fixtures; everything is seeded, so reruns are bit-identical.
Full gate takes roughly 20-35 minutes on a laptop CPU.
"""

import json
import time

import numpy as np
import pytest

from mpnode import analysis, autodiff as ad, datasets, dynamics, graphs, training
from mpnode.autodiff import Tensor
from mpnode.cli import main as cli_main
from mpnode.dynamics import rk4_step, simulate_trajectory
from mpnode.model import init_model, load_checkpoint, mlp_forward, rollout
from mpnode.training import TrainConfig


def report(num, name, detail):
    print(f"\ncriterion {num} ({name}): PASS - {detail}")


# ---------------------------------------------------------------------------
# shared trained artifacts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def kuramoto_assets():
    """Kuramoto10-BA, 200 trajectories; matched-seed p=7, p=7 clamped, p=1."""
    g = graphs.gen_barabasi_albert(10, 3, seed=9101)
    sys = dynamics.make_kuramoto(g, seed=9102)
    ts = datasets.generate_dataset(sys, g, n_traj=200, horizon=2.5, dt=0.05, seed=9103)
    train_set, val_set = datasets.split_train_val(ts, 0.7, seed=9200)

    def run(p, clamp):
        model = init_model(1, p, 0, hidden=(64, 64), seed=9300)
        cfg = TrainConfig(epochs=120, batch_size=128, loss="huber_time",
                          clamp_messages=clamp, seed=9400, eval_every=10)
        return training.train(model, train_set, val_set, cfg)

    t0 = time.perf_counter()
    _, p7 = run(7, False)
    _, p7_clamped = run(7, True)
    pair_seconds = time.perf_counter() - t0
    _, p1 = run(1, False)
    return {"p7": p7, "p7_clamped": p7_clamped, "p1": p1,
            "pair_seconds": pair_seconds}


@pytest.fixture(scope="module")
def pendulum_runs():
    """Coupled pendulum, 200 trajectories (reference recipe scaled to 5 s)."""
    sys = dynamics.make_pendulum()
    g = graphs.explicit_graph([[0.0, 1.0], [1.0, 0.0]])
    ts = datasets.generate_dataset(sys, g, n_traj=200, horizon=5.0, dt=0.1, seed=9001)
    train_set, val_set = datasets.split_train_val(ts, 0.7, seed=9210)

    def run(clamp):
        model = init_model(2, 7, 0, hidden=(64, 64), seed=9310)
        cfg = TrainConfig(epochs=400, batch_size=128, loss="mse",
                          clamp_messages=clamp, seed=9410, eval_every=100)
        return training.train(model, train_set, val_set, cfg)

    t0 = time.perf_counter()
    _, normal = run(False)
    _, clamped = run(True)
    return {"normal": normal, "clamped": clamped,
            "pair_seconds": time.perf_counter() - t0}


def lorenz_dataset(n, n_traj, seed, horizon=2.5):
    g = graphs.gen_fully_connected_weighted(n, 0.01, seed=seed)
    sys = dynamics.make_lorenz(g)
    return datasets.generate_dataset(sys, g, n_traj=n_traj, horizon=horizon,
                                     dt=0.05, seed=seed + 1)


@pytest.fixture(scope="module")
def lorenz_assets():
    """Lorenz3 low-coupling model (100 trajectories, 300 epochs) + val report."""
    ts = lorenz_dataset(3, 100, seed=7001)
    train_set, val_set = datasets.split_train_val(ts, 0.7, seed=7003)
    model = init_model(3, 7, 0, hidden=(64, 64), seed=7004)
    cfg = TrainConfig(epochs=300, batch_size=128, loss="huber_time", seed=7005,
                      eval_every=10)
    ckpt, record = training.train(model, train_set, val_set, cfg)
    base = analysis.evaluate(ckpt, val_set)
    return {"ckpt": ckpt, "record": record, "base": base}


@pytest.fixture(scope="module")
def gene_assets():
    """Gene 4x4 trained on five BA adjacencies; ER/WS sets for zero-shot."""
    gs = [graphs.gen_barabasi_albert(16, 4, seed=7400 + i) for i in range(5)]
    sys = dynamics.make_gene(gs[0])
    ts = datasets.generate_dataset(sys, gs, n_traj=200, horizon=5.0, dt=0.1, seed=7410)
    train_set, val_set = datasets.split_train_val(ts, 0.7, seed=7411)
    model = init_model(1, 7, 0, hidden=(64, 64), seed=7412)
    cfg = TrainConfig(epochs=200, batch_size=128, loss="mse", seed=7413, eval_every=10)
    ckpt, _ = training.train(model, train_set, val_set, cfg)
    g_er = graphs.gen_erdos_renyi(16, 8 / 15, seed=7501)
    er_set = datasets.generate_dataset(dynamics.make_gene(g_er), g_er, 30, 5.0, 0.1,
                                       seed=7502)
    g_ws = graphs.gen_watts_strogatz(16, 8, 0.3, seed=7503)
    ws_set = datasets.generate_dataset(dynamics.make_gene(g_ws), g_ws, 30, 5.0, 0.1,
                                       seed=7504)
    return {"ckpt": ckpt, "val": val_set, "er": er_set, "ws": ws_set}


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_oracle():
    """Rollout-loss gradients match central differences on random instances."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    combos = [(d, p, n) for d in (1, 2, 3) for p in (0, 1, 3) for n in (1, 2, 4)]
    rng.shuffle(combos)
    worst = 0.0
    for i, (d, p, n) in enumerate(combos[:20]):
        g = graphs.gen_erdos_renyi(n, 0.6, seed=500 + i)
        model = init_model(d, p, 0, hidden=(8,), seed=600 + i)
        x0 = ad.parameter(rng.standard_normal((n, d)))

        def f(params):
            states, _ = rollout(model, g, x0, T=5, dt=0.1)
            return ad.mean_all(ad.square(states))

        err = ad.finite_diff_check(f, [*model.parameters(), x0])
        worst = max(worst, err)
        assert err < 1e-4, f"instance {i} (d={d}, p={p}, n={n}): {err}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    report(1, "gradient oracle",
           f"20 instances, worst relative error {worst:.2e} in {elapsed:.1f}s")


def test_criterion_2_integrator_order():
    """RK4 order-4 on the linear test equation; pendulum equilibrium is exact."""
    def integrate(dt):
        x = np.array([1.0])
        for _ in range(int(round(1.0 / dt))):
            x = rk4_step(lambda x, u: -x, x, None, dt)
        return abs(x[0] - np.exp(-1.0))

    ratio = integrate(0.1) / integrate(0.05)
    assert 12.0 <= ratio <= 20.0
    traj = simulate_trajectory(dynamics.make_pendulum(), np.zeros((2, 2)), 10.0, 0.1)
    drift = np.abs(traj).max()
    assert drift <= 1e-9
    report(2, "integrator order",
           f"halving ratio {ratio:.2f}, pendulum zero-state drift {drift:.1e}")


def test_criterion_3_reduction_and_equivariance():
    """p=0 isolated node == plain neural ODE; relabeling permutes bits exactly."""
    rng = np.random.default_rng(301)
    model = init_model(3, 0, 0, hidden=(16,), seed=301)
    g1 = graphs.explicit_graph(np.zeros((1, 1)))
    x0 = rng.standard_normal((1, 3))
    states, _ = rollout(model, g1, x0, T=8, dt=0.05)
    cur, ref = Tensor(x0), [x0.copy()]
    for _ in range(7):
        cur = rk4_step(lambda a, u: mlp_forward(model, a, stable=True), cur, None, 0.05)
        ref.append(cur.data.copy())
    assert np.array_equal(states.data, np.stack(ref).reshape(8, 1, 3))

    for trial in range(10):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(1, 4))
        p = int(rng.integers(0, 4))
        g = graphs.gen_erdos_renyi(n, 0.5, seed=310 + trial)
        net = init_model(d, p, 0, hidden=(12,), seed=320 + trial)
        x = rng.standard_normal((n, d))
        perm = rng.permutation(n)
        s, m = rollout(net, g, x, T=6, dt=0.1)
        sp, mp_ = rollout(net, g.permuted(perm), x[perm], T=6, dt=0.1)
        assert np.array_equal(s.data[:, perm], sp.data), f"trial {trial}"
        assert np.array_equal(m.data[:, perm], mp_.data), f"trial {trial}"
    report(3, "reduction and equivariance",
           "p=0 reduction bit-exact; 10/10 permutation instances bit-exact")


def test_criterion_4_message_effect(pendulum_runs, kuramoto_assets):
    """Matched-seed training: active messages beat clamped by >= 20 percent."""
    for system, normal, clamped, seconds, budget in (
            ("pendulum", pendulum_runs["normal"], pendulum_runs["clamped"],
             pendulum_runs["pair_seconds"], 400),
            ("kuramoto10", kuramoto_assets["p7"], kuramoto_assets["p7_clamped"],
             kuramoto_assets["pair_seconds"], 120)):
        n_final = normal.final_train_loss()
        c_final = clamped.final_train_loss()
        margin = (c_final - n_final) / c_final
        assert budget <= 500
        assert n_final < c_final, f"{system}: messages did not win"
        assert margin >= 0.20, f"{system}: margin {margin:.1%} below 20%"
        assert seconds <= 15 * 60, f"{system}: pair took {seconds:.0f}s"
        report(4, f"message effect, {system}",
               f"{budget} epochs: active {n_final:.4f} vs clamped {c_final:.4f} "
               f"(margin {margin:.1%}) in {seconds:.0f}s")


def test_criterion_5_clamped_independence():
    """With clamped messages, node j's initial state cannot reach node k."""
    rng = np.random.default_rng(501)
    g = graphs.gen_erdos_renyi(5, 0.9, seed=501)
    model = init_model(2, 3, 0, seed=502)
    x0 = rng.standard_normal((5, 2))
    for j in range(5):
        bumped = x0.copy()
        bumped[j] += rng.standard_normal(2)
        a, _ = rollout(model, g, x0, T=7, dt=0.1, clamp_messages=True)
        b, _ = rollout(model, g, bumped, T=7, dt=0.1, clamp_messages=True)
        others = [k for k in range(5) if k != j]
        diff = np.abs(a.data[:, others] - b.data[:, others]).max()
        assert diff == 0.0, f"perturbing node {j} leaked {diff}"
    report(5, "clamped independence", "cross-node effect exactly 0 for all nodes")


def test_criterion_6_zero_shot_node_count(lorenz_assets):
    """Lorenz3 model rolls out on Lorenz7/Lorenz10 with bounded error growth."""
    base = lorenz_assets["base"].mean_normalized
    details = []
    for n, seed in ((7, 7101), (10, 7201)):
        zs = lorenz_dataset(n, 30, seed=seed)
        rep = analysis.evaluate(lorenz_assets["ckpt"], zs)
        assert rep.diverged == 0, f"lorenz{n}: {rep.diverged} diverged trajectories"
        assert all(np.isfinite(v) for v in rep.per_traj_normalized)
        ratio = rep.mean_normalized / base
        assert ratio <= 5.0, f"lorenz{n}: normalized MSE ratio {ratio:.2f} > 5"
        details.append(f"lorenz{n} ratio {ratio:.2f}")
    report(6, "zero-shot node count",
           f"base normalized MSE {base:.4f}; " + ", ".join(details))


def test_criterion_7_zero_shot_topology(gene_assets):
    """Gene model trained on BA evaluates on unseen ER and WS within 10x."""
    rep_ba = analysis.evaluate(gene_assets["ckpt"], gene_assets["val"])
    details = [f"BA {rep_ba.mean:.5f}"]
    for name in ("er", "ws"):
        rep = analysis.evaluate(gene_assets["ckpt"], gene_assets[name])
        assert rep.diverged == 0
        ratio = rep.mean / rep_ba.mean
        assert ratio <= 10.0, f"{name}: error ratio {ratio:.2f} > 10"
        details.append(f"{name.upper()} {rep.mean:.5f} (ratio {ratio:.2f})")
    report(7, "zero-shot topology", ", ".join(details))


def test_criterion_8_finetuning_advantage(lorenz_assets):
    """Finetuning the Lorenz3 model on Lorenz10 beats training from scratch."""
    t0 = time.perf_counter()
    l10 = lorenz_dataset(10, 50, seed=7301)
    train_set, val_set = datasets.split_train_val(l10, 0.7, seed=7303)
    cfg = TrainConfig(epochs=300, batch_size=128, loss="huber_time", seed=7304,
                      eval_every=10)
    scratch_model = init_model(3, 7, 0, hidden=(64, 64), seed=7305)
    _, rec_scratch = training.train(scratch_model, train_set, val_set, cfg)
    _, rec_ft = training.finetune(lorenz_assets["ckpt"], train_set, val_set, cfg)
    em_scratch = analysis.epochs_times_min_error(rec_scratch)
    em_ft = analysis.epochs_times_min_error(rec_ft)
    elapsed = time.perf_counter() - t0
    assert em_ft < em_scratch, f"finetuned {em_ft:.3f} not below scratch {em_scratch:.3f}"
    assert elapsed <= 20 * 60
    report(8, "finetuning advantage",
           f"epochs x min-error: finetuned {em_ft:.3f} vs scratch {em_scratch:.3f} "
           f"in {elapsed:.0f}s")


def test_criterion_9_message_size_sweep(kuramoto_assets):
    """Message size 7 is at least as accurate as size 1 on Kuramoto10."""
    best7 = kuramoto_assets["p7"].best_test_error()
    best1 = kuramoto_assets["p1"].best_test_error()
    assert best7 <= best1, f"p=7 best {best7:.5f} above p=1 best {best1:.5f}"
    report(9, "message size sweep", f"best test error p=7 {best7:.5f} <= p=1 {best1:.5f}")


def test_criterion_10_infrastructure(tmp_path):
    """Round trips, schemas, and end-to-end bit-identical reruns."""
    # z-score apply/invert round trip
    g = graphs.gen_fixed_degree(6, 3, seed=1001)
    sys = dynamics.make_kuramoto(g, seed=1002)
    ts = datasets.generate_dataset(sys, g, n_traj=8, horizon=0.5, dt=0.05, seed=1003)
    norm = datasets.zscore_fit(ts)
    back = datasets.zscore_invert(datasets.zscore_apply(ts, norm), norm)
    zerr = np.abs(back.data - ts.data).max() / max(np.abs(ts.data).max(), 1.0)
    assert zerr < 1e-12

    # dataset + checkpoint round trips, bit-exact
    datasets.save_dataset(ts, tmp_path / "ds")
    loaded = datasets.load_dataset(tmp_path / "ds")
    assert np.array_equal(loaded.data, ts.data)
    model = init_model(1, 3, 0, hidden=(8,), seed=1004)
    from mpnode.model import save_checkpoint
    save_checkpoint(model, norm, {"tag": "acceptance"}, tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert all(np.array_equal(a.data, b.data)
               for a, b in zip(model.parameters(), ck.model.parameters()))

    # end-to-end CLI rerun: identical (config, seed) -> identical bytes
    cfg = {
        "system": {"kind": "kuramoto", "params": {}},
        "graph": {"topology": "fixed", "n": 6, "degree": 3, "seed": 15},
        "dataset": {"n_traj": 10, "horizon": 0.5, "dt": 0.05,
                    "split_fraction": 0.7, "seed": 16},
        "model": {"message_dim": 2, "hidden": [8], "activation": "tanh", "seed": 17},
        "train": {"learning_rate": 0.001, "batch_size": 4, "epochs": 2,
                  "loss": "huber_time", "eval_every": 1, "seed": 18},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    outputs = []
    for run in ("a", "b"):
        droot = tmp_path / f"data_{run}"
        troot = tmp_path / f"train_{run}"
        eroot = tmp_path / f"eval_{run}"
        assert cli_main(["generate", "--config", str(cfg_path), "--out", str(droot)]) == 0
        assert cli_main(["train", "--config", str(cfg_path), "--data", str(droot),
                         "--out", str(troot)]) == 0
        assert cli_main(["eval", "--config", str(cfg_path), "--data", str(droot),
                         "--from", str(troot / "checkpoint.ckpt"),
                         "--out", str(eroot), "--split", "val"]) == 0
        metrics_no_wall = [",".join(line.split(",")[:4]) for line in
                           (troot / "metrics.csv").read_text().splitlines()]
        outputs.append({
            "data": (droot / "data.bin").read_bytes(),
            "manifest": (droot / "manifest.json").read_bytes(),
            "ckpt": (troot / "checkpoint.ckpt").read_bytes(),
            "metrics": metrics_no_wall,
            "report": (eroot / "report.json").read_bytes(),
        })
    for key in outputs[0]:
        assert outputs[0][key] == outputs[1][key], f"rerun differs in {key}"

    # schema spot checks
    metrics_header = (tmp_path / "train_a" / "metrics.csv").read_text().split("\n")[0]
    assert metrics_header == "epoch,train_loss,val_loss,test_error,wall_seconds"
    rep = json.loads((tmp_path / "eval_a" / "report.json").read_text())
    for key in ("mean", "std", "per_trajectory", "diverged", "fingerprint"):
        assert key in rep
    report(10, "infrastructure",
           f"round trips bit-exact, z-score error {zerr:.1e}, reruns identical")


def test_criterion_11_pca_correctness():
    """Jacobi eigenpairs satisfy the residual bound; 1-D data -> variance 1.0."""
    rng = np.random.default_rng(1101)
    worst = 0.0
    for dim in (2, 8, 32, 128):
        a = rng.standard_normal((dim, dim))
        cov = a @ a.T / dim
        vals, vecs = analysis.jacobi_eigh(cov)
        norm = np.sqrt((cov * cov).sum())
        for i in range(dim):
            resid = np.linalg.norm(cov @ vecs[:, i] - vals[i] * vecs[:, i])
            worst = max(worst, resid / norm)
            assert resid <= 1e-8 * norm
    t = rng.standard_normal((5, 20, 1, 1))
    direction = rng.standard_normal(6)
    log = (t * direction).reshape(5, 20, 2, 3)
    result = analysis.pca_messages(log, k=3)
    assert result.explained_variance[0] == pytest.approx(1.0, abs=1e-12)
    report(11, "pca correctness",
           f"worst residual/norm {worst:.1e} up to dim 128; "
           f"single-axis variance fraction {result.explained_variance[0]:.6f}")
