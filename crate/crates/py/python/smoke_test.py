"""Smoke test for the tilestyle_py extension module.

Build and run:

    cargo build -p tilestyle-py
    cp target/debug/libtilestyle_py.so crates/py/python/tilestyle_py.so
    python3 crates/py/python/smoke_test.py

or `maturin develop -m crates/py/Cargo.toml` followed by the last line.
"""

import math
import os
import sys
import tempfile

import tilestyle_py as ts


def main():
    assert ts.schedule(4, "fast") == ([600, 200, 66, 30], [100, 10, 10, 10])
    assert ts.recommended_scales(256, 256) == 1

    err = ts.gradient_check(64, 64, block=32, margin=16, dtype="f64")
    assert err <= 1e-10, err
    assert ts.gradient_check(64, 64, block=32, margin=0) >= 1e-2

    style = ts.painting(48, 48, 7)
    assert (style.height, style.width) == (48, 48)
    assert len(style.data()) == 3 * 48 * 48
    assert ts.psnr(style, style) == math.inf
    assert abs(ts.ssim(style, style) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "style.png")
        style.save(path)
        back = ts.Image.load(path)
        assert ts.psnr(style, back) > 40.0

    stats = ts.style_stats(style, block=32, margin=16)
    assert sorted(stats) == ["relu1_1", "relu2_1", "relu3_1"]
    s = stats["relu1_1"]
    assert len(s.mean) == s.channels and len(s.gram) == s.channels ** 2

    cfg = ts.RunConfig(n_scales=2, iters=[10, 5], block=32, margin=16, seed=3)
    assert cfg.schedule() == [10, 5]
    content = ts.smooth(48, 40, 1)
    out = ts.transfer(content, style, cfg)
    assert (out.height, out.width) == (48, 40)

    tex = ts.synthesize(style, cfg)
    assert tex == ts.synthesize(style, cfg)
    cfg.seed = 4
    assert tex != ts.synthesize(style, cfg)

    report, _ = ts.identity(style, ts.RunConfig(n_scales=2, iters=[20, 10], block=32, margin=16))
    assert report["gram_distance"] < report["initial_gram_distance"]
    assert math.isfinite(report["ssim"])

    try:
        ts.RunConfig(mode="slow")
    except ValueError:
        pass
    else:
        raise AssertionError("bad mode accepted")
    try:
        ts.Image.load(os.path.join("/nonexistent", "x.png"))
    except OSError:
        pass
    else:
        raise AssertionError("missing file loaded")

    print("tilestyle_py smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
