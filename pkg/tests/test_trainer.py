import json
import math

import numpy as np
import pytest

from flowtemper import diffgraph as dg
from flowtemper.flow import build_flow, log_prob
from flowtemper.mathcore import RngStream
from flowtemper.targets import TargetModel, ring_target
from flowtemper.trainer import (
    AdamWState,
    TrainConfig,
    adamw_step,
    estimate_elbo,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train,
    write_history,
)


def std_normal_target(d):
    return TargetModel(
        name="stdnorm",
        dim=d,
        log_density=lambda th: -0.5 * d * math.log(2 * math.pi) - dg.sum_(th * th, axis=1) / 2.0,
        true_log_evidence=0.0,
    )


def shifted_normal_target(mu):
    mu = np.asarray(mu, dtype=float)
    d = mu.size

    def logp(th):
        diff = th - mu[None, :]
        return -0.5 * d * math.log(2 * math.pi) - dg.sum_(diff * diff, axis=1) / 2.0

    return TargetModel(name="shifted", dim=d, log_density=logp, true_log_evidence=0.0)


def tiny_config(method="flowvat", **overrides):
    base = dict(
        method=method,
        pretrain_epochs=40,
        finetune_epochs=20,
        pretrain_lr=1e-3,
        finetune_lr=2e-4,
        batch_size=32,
        update_every=10,
        n_layers=2,
        hidden=(8,),
        knots=8,
        interval_halfwidth=8.0,
        elbo_samples=64,
        seed=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


# -- config ---------------------------------------------------------------------


def test_config_resolution_per_method():
    cfg = TrainConfig(method="flowvat").resolved()
    assert cfg.finetune_T_range == (0.95, 1.5)
    cfg = TrainConfig(method="nf_vi").resolved()
    assert cfg.finetune_T_range == (1.0, 1.0)
    with pytest.raises(ValueError, match="T=1 exactly"):
        TrainConfig(method="adaann", finetune_T_range=(0.95, 1.5)).resolved()


def test_config_presets():
    desk = TrainConfig.from_preset("desk", "flowvat", seed=7)
    assert desk.n_layers == 6 and desk.hidden == (128, 128)
    assert desk.pretrain_epochs == 3000 and desk.finetune_epochs == 1500
    paper = TrainConfig.from_preset("paper", "nf_vi")
    assert paper.hidden == (1024,) * 5 and paper.pretrain_epochs == 10_000
    assert paper.pretrain_lr == 5e-6 and paper.finetune_lr == 1e-6
    with pytest.raises(ValueError, match="unknown preset"):
        TrainConfig.from_preset("gpu", "flowvat")


def test_config_annealing_validation():
    with pytest.raises(ValueError, match="cannot reach"):
        tiny_config("adaann", pretrain_epochs=10, update_every=10).resolved()
    tiny_config("adaann", pretrain_epochs=40, update_every=10).resolved()
    with pytest.raises(ValueError, match="unknown method"):
        TrainConfig(method="hmc").resolved()


# -- AdamW ------------------------------------------------------------------------


def test_adamw_zero_gradient_no_decay():
    state = AdamWState.init(3, weight_decay=0.0)
    p = np.array([1.0, -2.0, 3.0])
    out = adamw_step(state, p, np.zeros(3), lr=0.1)
    np.testing.assert_array_equal(out, [1.0, -2.0, 3.0])


def test_adamw_decay_only():
    state = AdamWState.init(2, weight_decay=0.5)
    p = np.array([2.0, -4.0])
    adamw_step(state, p, np.zeros(2), lr=0.1)
    np.testing.assert_allclose(p, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_lr_zero_is_identity():
    state = AdamWState.init(2)
    p = np.array([1.0, 1.0])
    adamw_step(state, p, np.array([5.0, -3.0]), lr=0.0)
    np.testing.assert_array_equal(p, [1.0, 1.0])


def test_adamw_constant_gradient_reaches_sign_step():
    state = AdamWState.init(1, weight_decay=0.0)
    p = np.array([0.0])
    lr = 1e-3
    steps = []
    for _ in range(500):
        before = p[0]
        adamw_step(state, p, np.array([4.2]), lr=lr)
        steps.append(before - p[0])
    assert steps[-1] == pytest.approx(lr, rel=1e-3)  # lr * sign(g)


def test_adamw_rejects_nonfinite():
    state = AdamWState.init(1)
    with pytest.raises(ValueError, match="non-finite gradient"):
        adamw_step(state, np.array([0.0]), np.array([np.nan]), lr=0.1)


def test_adamw_deterministic():
    rng = np.random.default_rng(3)
    g = rng.normal(size=(20, 5))
    results = []
    for _ in range(2):
        state = AdamWState.init(5)
        p = np.ones(5)
        for k in range(20):
            adamw_step(state, p, g[k], lr=1e-2)
        results.append(p.copy())
    np.testing.assert_array_equal(results[0], results[1])


# -- ELBO estimation ----------------------------------------------------------------


def test_elbo_identity_flow_matched_target():
    model = build_flow(2, 2, (8,), 8, 8.0, RngStream(0))
    est = estimate_elbo(model, std_normal_target(2), n=500, rng=RngStream(1))
    assert est.mean == 0.0 and est.std_err == 0.0
    assert est.n == 500 and est.excluded == 0


def test_elbo_shifted_target_kl():
    model = build_flow(2, 2, (8,), 8, 8.0, RngStream(2))
    est = estimate_elbo(model, shifted_normal_target([1.0, 0.0]), n=4000, rng=RngStream(3))
    assert abs(est.mean - (-0.5)) < 3 * est.std_err


def test_elbo_requires_two_samples():
    model = build_flow(2, 2, (8,), 8, 8.0, RngStream(4))
    with pytest.raises(ValueError, match="n >= 2"):
        estimate_elbo(model, std_normal_target(2), n=1)


def test_elbo_excludes_nonfinite_and_errors_over_budget():
    model = build_flow(1, 2, (8,), 8, 8.0, RngStream(5))

    def spiky(th):
        v = dg.raw(th)[:, 0].copy()
        out = -0.5 * math.log(2 * math.pi) - v * v / 2.0
        out[v > 2.5] = np.inf  # rare tail
        return out

    target = TargetModel(name="spiky", dim=1, log_density=spiky)
    est = estimate_elbo(model, target, n=2000, rng=RngStream(6))
    assert est.excluded > 0
    assert est.n == 2000 - est.excluded

    def broken(th):
        v = dg.raw(th)[:, 0].copy()
        out = np.where(v > 0, np.inf, -1.0)
        return out

    with pytest.raises(RuntimeError, match="non-finite ELBO summands"):
        estimate_elbo(model, TargetModel(name="broken", dim=1, log_density=broken),
                      n=2000, rng=RngStream(7))


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_roundtrip_bitexact(tmp_path):
    model = build_flow(3, 3, (8, 8), 8, 8.0, RngStream(8))
    model.randomize(RngStream(9), 0.05)
    path = tmp_path / "ck.bin"
    save_checkpoint(model, {"note": "test"}, path)
    loaded = load_checkpoint(path)
    theta = np.array([0.3, -1.0, 0.7])
    assert log_prob(loaded, theta, 1.3) == log_prob(model, theta, 1.3)  # 0 ulps
    np.testing.assert_array_equal(loaded.params.values, model.params.values)
    header = read_checkpoint_header(path)
    assert header["config"] == {"note": "test"}


def test_checkpoint_zero_init_identity(tmp_path):
    model = build_flow(2, 2, (8,), 8, 8.0, RngStream(10))
    path = tmp_path / "ck.bin"
    save_checkpoint(model, None, path)
    loaded = load_checkpoint(path)
    z = np.random.default_rng(11).normal(size=(10, 2))
    theta, ld = loaded.forward_batch(z, 2.0)
    np.testing.assert_array_equal(theta, z)
    np.testing.assert_array_equal(ld, np.zeros(10))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="not a flowtemper checkpoint"):
        load_checkpoint(bad)

    model = build_flow(2, 2, (8,), 8, 8.0, RngStream(12))
    path = tmp_path / "ck.bin"
    save_checkpoint(model, None, path)
    data = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(data[:-16])
    with pytest.raises(ValueError, match="corrupt checkpoint payload"):
        load_checkpoint(tmp_path / "trunc.bin")
    (tmp_path / "ver.bin").write_bytes(data[:4] + b"\x63\x00\x00\x00" + data[8:])
    with pytest.raises(ValueError, match="unsupported checkpoint version"):
        load_checkpoint(tmp_path / "ver.bin")


def test_checkpoint_wrong_dim_target_errors(tmp_path):
    model = build_flow(3, 2, (8,), 8, 8.0, RngStream(13))
    path = tmp_path / "ck.bin"
    save_checkpoint(model, None, path)
    loaded = load_checkpoint(path)
    with pytest.raises(ValueError, match="mismatch|matrix"):
        # 2-d target density cannot consume 3-d samples
        from flowtemper.targets import gm_log_density, ring_gm_2d

        gm_log_density(ring_gm_2d(), loaded.sample(RngStream(0), 5, 1.0)[0])


# -- training loop ----------------------------------------------------------------------


def test_train_smoke_and_artifacts(tmp_path):
    _, target = ring_target()
    run_dir = tmp_path / "run"
    model, art = train(tiny_config(), target, run_dir=run_dir)
    assert (run_dir / "config.json").exists()
    assert (run_dir / "history.csv").exists()
    assert (run_dir / "checkpoint.bin").exists()
    assert (run_dir / "checkpoint_pretrain.bin").exists()
    assert (run_dir / "elbo.json").exists()
    assert (run_dir / "meta.json").exists()
    assert len(art.history) == 60
    assert all(np.isfinite(row[2]) for row in art.history)

    lines = (run_dir / "history.csv").read_text().strip().split("\n")
    assert lines[0] == "epoch,T_mean,loss"
    assert len(lines) == 61

    cfg_json = json.loads((run_dir / "config.json").read_text())
    assert cfg_json["method"] == "flowvat"
    assert cfg_json["finetune_T_range"] == [0.95, 1.5]

    elbo = json.loads((run_dir / "elbo.json").read_text())
    assert elbo["T"] == 1.0 and elbo["n"] > 0


def test_train_determinism(tmp_path):
    _, target = ring_target()
    dirs = []
    for name in ("a", "b"):
        d = tmp_path / name
        train(tiny_config(seed=5), target, run_dir=d)
        dirs.append(d)
    h0 = (dirs[0] / "history.csv").read_bytes()
    h1 = (dirs[1] / "history.csv").read_bytes()
    assert h0 == h1
    c0 = (dirs[0] / "checkpoint.bin").read_bytes()
    c1 = (dirs[1] / "checkpoint.bin").read_bytes()
    assert c0 == c1


def test_train_nf_vi_loss_decreases():
    target = shifted_normal_target([1.5, -0.5])
    cfg = tiny_config("nf_vi", pretrain_epochs=400, finetune_epochs=0, batch_size=64)
    _, art = train(cfg, target)
    losses = [row[2] for row in art.history]
    assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_train_methods_run():
    _, target = ring_target()
    for method in ("flowvat_exact", "target_only", "nf_vi", "linear_anneal", "adaann"):
        model, art = train(tiny_config(method, seed=3), target)
        assert np.isfinite(art.elbo.mean)
        temps = [row[1] for row in art.history]
        if method in ("linear_anneal", "adaann"):
            # nonincreasing during pretrain, exactly 1 in fine-tune
            pre = temps[:40]
            assert all(b <= a + 1e-12 for a, b in zip(pre, pre[1:]))
            assert all(t == 1.0 for t in temps[40:])
            assert pre[0] == 100.0
            assert pre[-1] == 1.0  # deadline clamp reached within pretrain
        if method == "nf_vi":
            assert all(t == 1.0 for t in temps)


def test_train_annealed_history_schedule_consistency():
    _, target = ring_target()
    cfg = tiny_config("linear_anneal", pretrain_epochs=50, finetune_epochs=0, update_every=10)
    _, art = train(cfg, target)
    temps = [row[1] for row in art.history]
    # piecewise constant between update epochs
    for start in range(0, 50, 10):
        assert len(set(temps[start : start + 10])) == 1


def test_write_history_format(tmp_path):
    path = tmp_path / "h.csv"
    write_history([(0, 1.0, -2.5), (1, 3.25, 0.125)], path)
    assert path.read_text() == "epoch,T_mean,loss\n0,1,-2.5\n1,3.25,0.125\n"
