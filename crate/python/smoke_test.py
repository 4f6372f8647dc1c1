"""Smoke test for the siftfunnel_py extension.

Build first:  cargo build -p siftfunnel-py
Then run:     python3 python/smoke_test.py [path/to/libsiftfunnel_py.so]
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load(lib_path):
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / "siftfunnel_py.so"
    shutil.copy(lib_path, target)
    spec = importlib.util.spec_from_file_location("siftfunnel_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    lib = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "target" / "debug" / "libsiftfunnel_py.so"
    sf = load(lib)

    full = sf.SplitModel(backbone="base_cnn", classes=10, resolution=(64, 64))
    assert full.edge_params() == 299_520, full.edge_params()
    funnel = sf.SplitModel(resolution=(64, 64), siftfunnel=True)
    assert 13_420 <= funnel.edge_params() <= 16_402, funnel.edge_params()
    print("edge params", full.edge_params(), funnel.edge_params(), funnel.edge_blocks())

    small = sf.SplitModel(width=0.125, seed=3, siftfunnel=True)
    pixels, shape, labels = sf.synthetic_images(4, classes=2, seed=1)
    assert shape == [4, 3, 32, 32] and len(labels) == 4
    z, zshape = small.tap(pixels, shape)
    assert zshape[0] == 4 and tuple(zshape[1:]) == small.feature_shape()
    post, pshape = small.tap(pixels, shape, point="post_compensation")
    assert len(post) == math.prod(pshape)
    logits, lshape = small.logits(pixels, shape)
    assert lshape == [4, 10] and all(math.isfinite(v) for v in logits)
    try:
        sf.SplitModel(width=0.125).tap(pixels, shape, point="post_compensation")
        raise AssertionError("tap after a missing compensation module should fail")
    except ValueError as e:
        print("rejected:", e)

    assert abs(sf.dcor(pixels, shape, pixels, shape) - 1.0) < 1e-6
    print("pearson", sf.pearson_loss(z, zshape), "tv", sf.tv(pixels, shape))
    mse, psnr, ssim = sf.quality(pixels, pixels, shape)
    assert mse == 0.0 and ssim > 0.999 and psnr == sf.psnr_db(0.0)

    est, truth, saturated = sf.mine_gaussian(0.9, seed=0, steps=1500)
    print(f"mine rho=0.9: {est:.3f} vs {truth:.3f}, saturated={saturated}")
    assert abs(est - truth) < 0.3

    bound, vacuous = sf.fano(10.0, 3.0, 12.0)
    assert bound == 0.5 and not vacuous
    score, degenerate = sf.dmia(4.0, 2.0, 100.0)
    assert abs(score - 0.02) < 1e-12 and not degenerate

    frame = sf.encode_frame(z, zshape)
    assert len(frame) == 29 + 4 * len(z)
    back, bshape = sf.decode_frame(frame)
    assert bshape == zshape and back == z
    try:
        sf.decode_frame(b"XXXX" + frame[4:])
        raise AssertionError("bad magic should be rejected")
    except (ValueError, RuntimeError) as e:
        print("rejected:", e)
    print("smoke test ok")


if __name__ == "__main__":
    main()
