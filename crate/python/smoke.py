"""Smoke test for the sdfrecon Python bindings.

Build first with `cargo build --release -p sdfrecon-py`, then run
`python3 python/smoke.py`. The script copies the built library next to a
temporary module path so no packaging tool is needed.
"""

import importlib
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(tmp):
    lib_dir = os.environ.get("SDFRECON_LIB_DIR", os.path.join(ROOT, "target", "release"))
    for name in ("libsdfrecon_py.so", "libsdfrecon_py.dylib", "sdfrecon_py.dll"):
        src = os.path.join(lib_dir, name)
        if os.path.exists(src):
            ext = ".pyd" if name.endswith(".dll") else ".so"
            shutil.copy(src, os.path.join(tmp, "sdfrecon_py" + ext))
            sys.path.insert(0, tmp)
            return importlib.import_module("sdfrecon_py")
    sys.exit(f"no built library in {lib_dir}; run cargo build --release -p sdfrecon-py")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        sr = load_module(tmp)

        beta = 0.1
        assert abs(sr.density(0.0, beta) - 1.0 / (2.0 * beta)) < 1e-12
        assert sr.density(-1.0, beta) > sr.density(1.0, beta)

        pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        m = sr.metrics(pts, pts, 0.05)
        assert m["f_score"] == 1.0, m

        data = os.path.join(tmp, "data")
        run = os.path.join(tmp, "run")
        views = sr.synth(data, seed=3, match_points=50)
        assert views == 20

        cfg = sr.default_config()
        for key, value in [("iterations", 4), ("batch_rays", 16), ("samples_per_ray", 8),
                           ("eikonal_uniform", 16), ("eikonal_near", 16)]:
            cfg += f"{key} = {value}\n"
        losses = sr.train(data, run, cfg)
        assert len(losses) == 4 and all(l == l for l in losses), losses

        verts, tris = sr.mesh(run, resolution=24)
        assert len(verts) > 0 and len(tris) > 0
        report = sr.evaluate(run, data, resolution=24)
        assert 0.0 <= report["f_score"] <= 1.0, report

        try:
            sr.train(data, run, "no_such_key = 1\n")
        except ValueError as e:
            assert "no_such_key" in str(e)
        else:
            raise AssertionError("unknown config key was accepted")

        print(f"ok: {len(losses)} steps, mesh {len(verts)} vertices, F {report['f_score']:.3f}")


if __name__ == "__main__":
    main()
