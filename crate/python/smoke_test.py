"""Smoke test for the adaptive_vmc_py extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
Then run from the repository root:
    python python/smoke_test.py
"""

import math
import pathlib
import tempfile

import adaptive_vmc_py as avmc

ROOT = pathlib.Path(__file__).resolve().parent.parent
SMOKE = ROOT / "crates/core/assets/configs/smoke.toml"


def check_chain():
    chain = avmc.Chain.load("builtin:planar3")
    assert chain.dof == 3
    q = [0.2, -0.4, 0.9]
    j = chain.jacobian(q, 2)
    h = 1e-6
    for k in range(3):
        qp, qm = list(q), list(q)
        qp[k] += h
        qm[k] -= h
        pp = chain.link_point_position(qp, 2)
        pm = chain.link_point_position(qm, 2)
        for r in range(3):
            assert abs((pp[r] - pm[r]) / (2 * h) - j[r][k]) < 1e-6
    assert avmc.Chain.load("builtin:panda").dof == 7


def check_algebra():
    w = avmc.component_weights(0.3, 0.6)
    assert abs(sum(w) - 1.0) < 1e-12
    assert avmc.virtual_force(100.0, 10.0, [0, 0, 0], [1, 0, 0], [0, 1, 0]) == [-10.0, 100.0, 0.0]
    a = avmc.decode([0.0] * 8)
    assert all(10.0 <= k <= 800.0 for k in a["kp"])
    assert 0.0 <= a["alpha"] <= 1.0
    assert avmc.spearman([1, 2, 3], [3, 2, 1]) == -1.0


def check_env():
    env = avmc.ReachingEnv(str(SMOKE))
    obs = env.reset(0)
    assert len(obs) == env.obs_dim == 30
    total = 0.0
    done = False
    while not done:
        obs, reward, done, info = env.step([0.0] * env.action_dim)
        assert reward <= 0.0 and math.isfinite(info["error"])
        total += reward
    s = env.summarize()
    assert s["steps"] == 100 and math.isfinite(total)


def check_experiment():
    exp = avmc.Experiment.load(str(SMOKE))
    assert exp.iterations == 5
    with tempfile.TemporaryDirectory() as tmp:
        exp.out_dir = tmp
        exp.iterations = 2
        metrics = exp.train()
        assert len(metrics) == 1 and len(metrics[0]) == 2
        ck = pathlib.Path(tmp) / "seed_0/checkpoints/final.ckpt"
        summary = exp.evaluate_checkpoint(str(ck), seed=0, episodes=2)
        assert summary["episodes"] == 2
        assert 0.0 <= summary["success_rate"] <= 1.0
    try:
        avmc.Experiment.load(str(ROOT / "missing.toml"))
    except RuntimeError:
        pass
    else:
        raise AssertionError("missing config should raise")


if __name__ == "__main__":
    check_chain()
    check_algebra()
    check_env()
    check_experiment()
    print("python smoke test: ok")
