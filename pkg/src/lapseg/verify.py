"""Self-contained verification suites: finite differences and naive oracles.

Both suites return (name, max_error, tolerance, passed) rows so the CLI can
print one line per check and exit nonzero on any failure; the test suite
asserts on the same rows. Gradient checks run in float64 with a 1e-5 step
against a mixed absolute/relative tolerance.
"""

from dataclasses import dataclass

import numpy as np

from . import model, reconstruction, reference
from .losses import logistic_loss, softmax_xent
from .model import ModelConfig
from .ops import ConvSpec, bilinear_resize, bilinear_resize_backward, conv2d, \
    conv2d_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, sigmoid, \
    sigmoid_backward
from .refinement import fuse_level
from .rng import Stream

FD_STEP = 1e-5
FD_TOL = 1e-5
FD_TOL_E2E = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    passed: bool


def _mixed_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _rand(st, shape, lo=-1.0, hi=1.0):
    return (st.uniform(shape) * (hi - lo) + lo).astype(np.float64)


def _check_grad(name, fn, x, analytic, tol=FD_TOL, results=None):
    fd = reference.finite_difference(fn, x, step=FD_STEP)
    err = _mixed_err(analytic.astype(np.float64), fd)
    results.append(CheckResult(name, err, tol, err <= tol))


def run_gradient_checks():
    """Finite-difference verification of every backward path."""
    results = []
    st = Stream(7, "gradcheck")

    # conv2d: input, weight, and bias paths
    x = _rand(st, (2, 3, 6, 6))
    w = _rand(st, (4, 3, 3, 3))
    b = _rand(st, (4,))
    spec = ConvSpec(3, 3, 3, 4, stride=1, pad=1)
    g = _rand(st, conv2d(x, w, b, spec).shape)
    gx, gw, gb = conv2d_backward(x, w, spec, g)
    _check_grad("conv2d/input", lambda v: float((conv2d(v, w, b, spec) * g).sum()),
                x.copy(), gx, results=results)
    _check_grad("conv2d/weights", lambda v: float((conv2d(x, v, b, spec) * g).sum()),
                w.copy(), gw, results=results)
    _check_grad("conv2d/bias", lambda v: float((conv2d(x, w, v, spec) * g).sum()),
                b.copy(), gb, results=results)

    # reconstruction: coefficient and basis paths
    coeffs = _rand(st, (2, 3, 4, 3, 2))
    funcs = _rand(st, (4, 4, 4, 3))
    bank = reconstruction.BasisBank(stride=2, functions=funcs)
    gy = _rand(st, (2, 3, 6, 4))
    gc, gf = reconstruction.reconstruct_backward(coeffs, bank, gy)
    _check_grad("reconstruct/coefficients",
                lambda v: float((reconstruction.reconstruct(v, bank) * gy).sum()),
                coeffs.copy(), gc, results=results)

    def loss_of_funcs(v):
        return float((reconstruction.reconstruct(
            coeffs, reconstruction.BasisBank(stride=2, functions=v)) * gy).sum())
    _check_grad("reconstruct/bases", loss_of_funcs, funcs.copy(), gf, results=results)

    # maxpool (random values: ties have measure zero)
    xp = _rand(st, (2, 2, 6, 6))
    gp = _rand(st, (2, 2, 3, 3))

    def pool_loss(v):
        out, _ = maxpool2d(v, 2, 2)
        return float((out * gp).sum())
    _, argmax = maxpool2d(xp, 2, 2)
    _check_grad("maxpool2d", pool_loss, xp.copy(),
                maxpool2d_backward(argmax, gp, xp.shape), results=results)

    # bilinear resize (up and down)
    xr = _rand(st, (1, 2, 5, 4))
    for oh, ow, tag in ((9, 7, "up"), (3, 2, "down")):
        gr = _rand(st, (1, 2, oh, ow))
        _check_grad(f"bilinear_resize/{tag}",
                    lambda v, oh=oh, ow=ow, gr=gr: float((bilinear_resize(v, oh, ow) * gr).sum()),
                    xr.copy(), bilinear_resize_backward(gr, 5, 4), results=results)

    # losses
    scores = _rand(st, (2, 4, 4, 4), -2, 2)
    truth = st.randint(0, 4, (2, 4, 4)).astype(np.uint8)
    truth[0, 0, 0] = 255
    _, gs = softmax_xent(scores, truth)
    _check_grad("softmax_xent", lambda v: softmax_xent(v, truth)[0],
                scores.copy(), gs, results=results)

    logits = _rand(st, (2, 3, 4, 4), -3, 3)
    targets = (st.uniform((2, 3, 4, 4)) > 0.5).astype(np.float64)
    _, gl = logistic_loss(logits, targets)
    _check_grad("logistic_loss", lambda v: logistic_loss(v, targets)[0],
                logits.copy(), gl, results=results)

    # activations
    xs = _rand(st, (2, 3, 4, 4), -2, 2)
    ga = _rand(st, (2, 3, 4, 4))
    _, rmask = relu(xs)
    _check_grad("relu", lambda v: float((relu(v)[0] * ga).sum()),
                xs.copy(), relu_backward(rmask, ga), results=results)
    sout = sigmoid(xs)
    _check_grad("sigmoid", lambda v: float((sigmoid(v) * ga).sum()),
                xs.copy(), sigmoid_backward(sout, ga), results=results)

    # fusion with the gate held fixed
    coarse = _rand(st, (1, 3, 6, 6))
    fine = _rand(st, (1, 3, 6, 6))
    mask = (st.uniform((1, 3, 6, 6)) > 0.5).astype(np.float64)
    gf_ = _rand(st, (1, 3, 6, 6))
    _check_grad("fuse_level/coarse",
                lambda v: float((fuse_level(v, fine, mask) * gf_).sum()),
                coarse.copy(), gf_, results=results)
    _check_grad("fuse_level/fine",
                lambda v: float((fuse_level(coarse, v, mask) * gf_).sum()),
                fine.copy(), gf_ * mask, results=results)

    results.append(_end_to_end_probe())
    return results


def _end_to_end_probe():
    """Finite differences through the whole pyramid on a few probed weights.

    Masks are non-differentiable gates; they are recomputed inside the loss
    closure, so probes sit on parameters small enough not to flip any gate
    at the 1e-5 step (near-zero head weights keep masks locally constant).
    """
    cfg = ModelConfig(num_classes=2, bases_per_class=2, widths=(4, 6, 8, 10), seed=3)
    st = Stream(11, "e2e")
    params = model.init_params(cfg, dtype=np.float64)
    image = _rand(st, (1, 3, 32, 32), 0, 1)
    truth = st.randint(0, 2, (1, 32, 32)).astype(np.uint8)

    levels, cache = model.forward(params, cfg, image)
    frozen = [lv.mask for lv in levels]

    def total_loss(p):
        lvls, _ = model.forward(p, cfg, image, fixed_masks=frozen)
        loss = 0.0
        for lv in lvls:
            factor = lv.stride // 4
            loss += softmax_xent(lv.fused, truth[:, ::factor, ::factor])[0]
        return loss

    level_grads = []
    for lv in levels:
        factor = lv.stride // 4
        level_grads.append(softmax_xent(lv.fused, truth[:, ::factor, ::factor])[1])
    grads = model.backward(params, cfg, cache, level_grads)

    worst = 0.0
    probe_names = ["backbone.stage1.conv0.weight", "backbone.stage4.conv1.weight",
                   "head.32.weight", "head.8.weight", "head.4.bias"]
    for name in probe_names:
        p = params[name]
        pick = Stream(13, "probe", name)
        flat_idx = [pick.randint(0, p.size) for _ in range(5)]
        base = total_loss(params)

        analytic = grads.get(name)
        for fi in flat_idx:
            orig = p.flat[fi]
            p.flat[fi] = orig + FD_STEP
            fp = total_loss(params)
            p.flat[fi] = orig - FD_STEP
            fm = total_loss(params)
            p.flat[fi] = orig
            fd = (fp - fm) / (2 * FD_STEP)
            an = analytic.flat[fi] if analytic is not None else 0.0
            err = abs(an - fd) / max(1.0, abs(an), abs(fd))
            worst = max(worst, err)
        del base
    return CheckResult("pyramid/end_to_end", worst, FD_TOL_E2E, worst <= FD_TOL_E2E)


# ---------------------------------------------------------------------------

def run_oracle_checks():
    """Vectorized paths against their naive-loop reference implementations."""
    results = []
    st = Stream(23, "oracle")

    # convolution
    x = _rand(st, (2, 3, 8, 8))
    w = _rand(st, (4, 3, 5, 5))
    b = _rand(st, (4,))
    spec = ConvSpec(5, 5, 3, 4, stride=1, pad=2)
    err = _mixed_err(conv2d(x, w, b, spec), reference.conv2d_naive(x, w, b, 1, 2))
    results.append(CheckResult("conv2d vs naive", err, 1e-6, err <= 1e-6))

    # reconstruction across the contract grid
    worst = 0.0
    for s in (1, 2, 4):
        for k in (1, 3, 10):
            for c in (1, 2, 5):
                coeffs = _rand(st, (1, c, k, 3, 2))
                funcs = _rand(st, (2 * s, 2 * s, k, c))
                bank = reconstruction.BasisBank(stride=s, functions=funcs)
                got = reconstruction.reconstruct(coeffs, bank)
                want = reference.reconstruct_naive(coeffs, funcs, s)
                worst = max(worst, _mixed_err(got, want))
    results.append(CheckResult("reconstruct vs naive grid", worst, 1e-6, worst <= 1e-6))

    # max pooling as Chebyshev dilation
    mask = (st.uniform((12, 12)) > 0.8).astype(np.float64)
    pooled, _ = maxpool2d(mask[None, None], 9, 1, 4)
    want = reference.chebyshev_dilate_naive(mask.astype(bool), 4)
    ok = np.array_equal(pooled[0, 0].astype(bool), want)
    results.append(CheckResult("maxpool vs Chebyshev dilation", 0.0 if ok else 1.0,
                               0.0, ok))

    # disk morphology
    from .losses import disk_dilate, disk_erode
    worst_m = True
    for r in (1, 3, 10):
        m = (st.uniform((32, 32)) > 0.9)
        worst_m &= np.array_equal(disk_dilate(m, r), reference.disk_dilate_naive(m, r))
        worst_m &= np.array_equal(disk_erode(m, r), reference.disk_erode_naive(m, r))
    results.append(CheckResult("disk morphology vs Minkowski", 0.0 if worst_m else 1.0,
                               0.0, bool(worst_m)))

    # confusion-matrix metrics
    from .evaluation import ConfusionMatrix, metrics
    exact = True
    for _ in range(20):
        pred = st.randint(0, 4, (10, 10)).astype(np.uint8)
        truth = st.randint(0, 4, (10, 10)).astype(np.uint8)
        truth[st.uniform((10, 10)) > 0.9] = 255
        cm = ConfusionMatrix(4).accumulate(pred, truth)
        got = metrics(cm)
        pa, ma, miou = reference.metrics_naive(pred, truth, 4)
        exact &= got.pixel_acc == pa and abs(got.mean_iou - miou) < 1e-15 \
            and abs(got.mean_class_acc - ma) < 1e-15
    results.append(CheckResult("metrics vs set arithmetic", 0.0 if exact else 1.0,
                               0.0, bool(exact)))
    return results
