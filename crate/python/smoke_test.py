"""Smoke test for the Python bindings.

Build the extension first:

    cargo build -p energy-policy-py --release --features extension-module

then run `python3 python/smoke_test.py` from the repository root. The script
copies the built library next to a temp dir as `energy_policy.so` and imports it.
"""

import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libenergy_policy_py.so"
        if lib.exists():
            break
    else:
        sys.exit("extension not built; see the module docstring")
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "energy_policy.so")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("energy_policy"), tmp


def main():
    ep, tmp = load_module()

    # p = 1/2 d0 + 1/2 d2 scored at y = 1 is exactly 1
    score = ep.discrete_score([[0.0], [2.0]], [0.5, 0.5], [1.0], alpha=1.0)
    assert abs(score - 1.0) < 1e-12, score
    near = ep.energy_distance([[0.0], [1.0]], [[0.1], [1.1]])
    far = ep.energy_distance([[0.0], [1.0]], [[3.0], [4.0]])
    assert near < far, (near, far)

    ds = ep.Dataset.generate("line_reach", 8, seed=3)
    assert len(ds) == 8 and ds.env == "line_reach"
    ds.save(tmp / "demo.epds")
    again = ep.Dataset.load(tmp / "demo.epds")
    assert again.episode(0) == ds.episode(0)

    policy = ep.Policy(d_obs=1, d_action=1, pred_horizon=4, exec_horizon=2, d_model=16, head_width=16)
    chunk = policy.predict_chunk([[0.0], [0.0]], seed=1)
    assert len(chunk) == 4 and all(len(r) == 1 for r in chunk)
    assert policy.call_counts() == (1, 1)

    trainer = ep.Trainer(policy, ds, epochs=2, batch_size=32, learning_rate=1e-3)
    losses = trainer.run()
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)

    ckpt = trainer.checkpoint()
    ckpt.save(tmp / "model.ckpt")
    loaded = ep.Checkpoint.load(tmp / "model.ckpt")
    assert loaded.epoch == 2
    assert loaded.policy().predict_chunk([[0.0], [0.0]], 5) == trainer.policy().predict_chunk([[0.0], [0.0]], 5)
    rate = loaded.evaluate(episodes=3)
    assert 0.0 <= rate <= 1.0

    try:
        ep.Policy(alpha=2.5)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha outside (0, 2) must be rejected")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
