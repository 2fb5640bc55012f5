"""Smoke test for the hitld_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/hitld_py-*.whl
"""

import os
import sys
import tempfile

import hitld_py

TINY = """\
point_budget = 32
encoder_hidden = [16]
denoiser_hidden = [32]
time_embed_dim = 8
epochs = 3
trials = 2
"""


def main() -> int:
    assert hitld_py.fps_indices([[0, 0, 0], [0.1, 0, 0], [1, 1, 0]], 2) == [0, 2]

    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "tiny.toml")
        with open(cfg, "w") as f:
            f.write(TINY)
        data = os.path.join(tmp, "screwdriver.hitldemo")
        ckpt = os.path.join(tmp, "screwdriver.json")

        summary = hitld_py.generate_demo("screwdriver", data, seed=3, config=cfg)
        assert summary["frames"] == 256, summary

        loss = hitld_py.train(data, ckpt, seed=3, config=cfg)
        assert loss == loss and loss >= 0.0

        report = hitld_py.evaluate(ckpt, "screwdriver", config=cfg)
        assert len(report["mean_abs_error"]) == 3

        m = hitld_py.run_episode("screwdriver", "cartesian", seed=1, config=cfg)
        assert m["success"], m
        m2 = hitld_py.run_episode("screwdriver", "hitl_d", seed=1, policy=ckpt, config=cfg)
        assert m2["mode"] == "hitl_d"

        res = hitld_py.study(["screwdriver"], ["hitl_d", "cartesian"], 2,
                             policies={"screwdriver": ckpt}, config=cfg)
        assert len(res["rows"]) == 4

        try:
            hitld_py.run_episode("juggling", "cartesian")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown task accepted")

    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
