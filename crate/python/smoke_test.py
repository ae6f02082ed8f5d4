"""Smoke test for the treevb_py extension.

Build first:
    cargo build -p treevb-py --features extension-module --release
then run:
    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import random
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load():
    try:
        import treevb_py

        return treevb_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libtreevb_py.so", "libtreevb_py.dylib", "treevb_py.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("treevb_py", str(path))
                spec = importlib.util.spec_from_loader("treevb_py", loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("treevb_py not found; build it with cargo first")


def main():
    tv = load()
    rng = random.Random(0)

    layout = tv.WaveletLayout(16, 16, 3)
    px = [rng.random() for _ in range(256)]
    coeffs = layout.forward(px)
    back = layout.inverse(coeffs)
    assert len(layout) == 256
    assert max(abs(a - b) for a, b in zip(px, back)) < 1e-10
    assert abs(sum(v * v for v in px) - sum(c * c for c in coeffs)) < 1e-9
    print("wavelet round trip ok")

    lap = tv.Potential.laplace(2.0)
    assert abs(lap.neg2_log(0.5) - (2.0 - 2.0 * math.log(1.0))) < 1e-12
    s = 0.7
    g = lap.gamma_min(s)
    assert abs(s * s / g + lap.h_dual(g) - lap.neg2_log(s)) < 1e-10
    print("potentials ok:", lap, tv.Potential.student_t(1.0), tv.Potential.gaussian(3.0))

    truth = [0.8 if (i % 16) > 7 else 0.2 for i in range(256)]
    noisy = [t + 0.1 * rng.gauss(0.0, 1.0) for t in truth]
    res = tv.reconstruct(noisy, 16, 16, model="lap-tree", mode="vb", sigma2=0.01, levels=3, outer=3)
    before, after = tv.psnr(noisy, truth), tv.psnr(res.u, truth)
    print(f"denoising: {before:.2f} dB -> {after:.2f} dB, {res.outer_iters} outer iterations")
    assert after > before
    assert res.q1 is not None and len(res.q1) == 256 - layout.n_scaling

    observed = sorted(rng.sample(range(256), 128))
    res = tv.reconstruct(truth, 16, 16, observed=observed, model="t-fact", mode="map", sigma2=1e-4, levels=3)
    print(f"inpainting (MAP, t-fact): {tv.psnr(res.u, truth):.2f} dB")
    assert res.q1 is None and len(res.level_scales) == 3

    try:
        tv.reconstruct(noisy, 16, 16, model="nope")
    except ValueError as e:
        print("bad model rejected:", e)
    else:
        raise AssertionError("expected ValueError")

    assert tv.selftest()
    print("selftest ok")


if __name__ == "__main__":
    main()
