"""Central finite-difference verification of analytic gradients.

The numeric side perturbs raw input arrays one coordinate at a time and
re-runs the forward function, so it is independent of every adjoint it
checks. Large tensors are probed on a deterministic random subset of
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numeric_grad(f, arrays, which, coords, h=1e-5):
    """d f(arrays) / d arrays[which] at the given flat coordinates.

    f maps a list of numpy arrays to a float. Central differences with
    step h; arrays are restored after each probe.
    """
    a = arrays[which]
    flat = a.reshape(-1)
    out = np.zeros(len(coords))
    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = f(arrays)
        flat[c] = orig - h
        fm = f(arrays)
        flat[c] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def _pick_coords(rng, size, limit):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def max_relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| / (|a| + |n|), skipping entries below the magnitude floor."""
    scale = np.abs(analytic) + np.abs(numeric)
    keep = scale > floor
    if not np.any(keep):
        return 0.0
    return float((np.abs(analytic - numeric)[keep] / scale[keep]).max())


def check_op(build, inputs, h=1e-5, max_coords=64, seed=0):
    """Compare analytic gradients of scalar build(*tensors) against differences.

    build receives one Tensor per input array and must return a scalar
    Tensor. Returns the max relative error across all inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]

    def forward(arrs):
        ts = [Tensor(a) for a in arrs]
        return float(build(*ts).data)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    for t in tensors:
        t.zero_grad()
    loss = build(*tensors)
    loss.backward()

    worst = 0.0
    for i, t in enumerate(tensors):
        coords = _pick_coords(rng, arrays[i].size, max_coords)
        num = numeric_grad(forward, [a.copy() for a in arrays], i, coords, h=h)
        ana = t.grad.reshape(-1)[coords]
        worst = max(worst, max_relative_error(ana, num))
    return worst


@dataclass
class OpCheckResult:
    op: str
    case: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _away_from_kinks(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def op_inventory_cases(seed=0):
    """(name, build, inputs) triples: >= 3 random-shape cases per op."""
    rng = np.random.default_rng(seed)
    cases = []

    def r(*shape):
        return rng.normal(size=shape)

    for shape in [(3,), (2, 4), (2, 3, 4)]:
        a, b = r(*shape), r(*shape)
        cases.append(("add", lambda x, y: (x + y).sum(), [a, b]))
        cases.append(("sub", lambda x, y: ((x - y) * (x - y)).sum(), [a, b]))
        cases.append(("mul", lambda x, y: (x * y).sum(), [a, b]))
    # broadcast paths
    cases.append(("add", lambda x, y: (x + y).sum(), [r(2, 3, 4), r(4)]))
    cases.append(("mul", lambda x, y: (x * y).sum(), [r(5, 1, 3), r(1, 2, 3)]))
    cases.append(("sub", lambda x, y: (x - y).mean(), [r(3, 4), r(1, 4)]))

    for sa, sb in [((3, 4), (4, 2)), ((2, 5, 3), (2, 3, 4)), ((6, 6), (6, 6))]:
        cases.append(("matmul", lambda x, y: (x @ y).sum(), [r(*sa), r(*sb)]))

    conv_shapes = [
        ((1, 2, 5, 5, 5), (3, 2, 3, 3, 3), 1, 1),
        ((2, 1, 4, 4, 4), (2, 1, 3, 3, 3), 1, 0),
        ((1, 2, 7, 5, 5), (2, 2, 3, 3, 3), 2, 0),
        ((1, 3, 4, 4, 4), (4, 3, 1, 1, 1), 1, 0),
    ]
    for xs, ws, st, pd in conv_shapes:
        x, w, bias = r(*xs), r(*ws) * 0.5, r(ws[0])
        cases.append(
            (
                "conv3d",
                lambda xx, ww, bb, st=st, pd=pd: (
                    ad.conv3d(xx, ww, bb, stride=st, pad=pd) * 0.1
                ).sum(),
                [x, w, bias],
            )
        )

    for shape in [(1, 2, 3, 3, 3), (2, 3, 4, 4, 4), (1, 1, 2, 5, 3)]:
        x, g, bshift = r(*shape), 1.0 + 0.2 * r(shape[1]), 0.2 * r(shape[1])
        cases.append(
            (
                "instance_norm",
                lambda xx, gg, bb: (ad.instance_norm(xx, gg, bb, eps=1e-5) * 0.3).sum(),
                [x, g, bshift],
            )
        )

    for shape in [(4, 6), (2, 3, 5), (7,)]:
        x, g, bshift = r(*shape), 1.0 + 0.2 * r(shape[-1]), 0.2 * r(shape[-1])
        cases.append(
            (
                "layer_norm",
                lambda xx, gg, bb: (ad.layer_norm(xx, gg, bb, eps=1e-5) * 0.3).sum(),
                [x, g, bshift],
            )
        )

    for shape in [(5,), (3, 4), (2, 3, 3)]:
        cases.append(
            (
                "leaky_relu",
                lambda xx: (ad.leaky_relu(xx) * 0.7).sum(),
                [_away_from_kinks(rng, shape)],
            )
        )
        cases.append(("sigmoid", lambda xx: (ad.sigmoid(xx) * 0.7).sum(), [r(*shape)]))

    for shape, axis in [((5,), -1), ((3, 4), -1), ((2, 3, 4), 1)]:
        w = r(*shape)
        cases.append(
            (
                "softmax",
                lambda xx, ww=Tensor(w), axis=axis: (ad.softmax(xx, axis=axis) * ww).sum(),
                [r(*shape)],
            )
        )

    for shapes, axis in [([(2, 3), (4, 3)], 0), ([(2, 2, 2), (2, 1, 2)], 1), ([(3,), (2,), (4,)], 0)]:
        arrs = [r(*s) for s in shapes]
        cases.append(
            (
                "concat",
                lambda *ts, axis=axis: (ad.concat(list(ts), axis=axis) * 0.5).sum(),
                arrs,
            )
        )

    for shape, new in [((2, 6), (3, 4)), ((2, 3, 4), (24,)), ((4, 4), (2, 2, 4))]:
        cases.append(
            ("reshape", lambda xx, new=new: (ad.reshape(xx, new) * ad.reshape(xx, new)).sum(), [r(*shape)])
        )

    for shape, axes in [((2, 3), (1, 0)), ((2, 3, 4), (2, 0, 1)), ((2, 2, 3, 3), (0, 3, 1, 2))]:
        scale = Tensor(rng.normal(size=tuple(shape[a] for a in axes)))
        cases.append(
            ("permute", lambda xx, axes=axes, s=scale: (ad.permute(xx, axes) * s).sum(), [r(*shape)])
        )

    for shape, axis in [((5,), None), ((3, 4), 0), ((2, 3, 4), (1, 2))]:
        cases.append(("mean", lambda xx, axis=axis: (ad.mean(xx, axis=axis) * 1.3).sum(), [r(*shape)]))
        cases.append(("sum", lambda xx, axis=axis: (ad.sum(xx, axis=axis) * 0.7).sum(), [r(*shape)]))

    for shape in [(1, 1, 2, 2, 2), (2, 3, 2, 2, 2), (1, 2, 3, 2, 1)]:
        cases.append(
            ("upsample_nearest2x", lambda xx: (ad.upsample_nearest2x(xx) * 0.5).sum(), [r(*shape)])
        )

    for shape, index in [((5,), np.s_[1:4]), ((4, 5), np.s_[1:3, ::2]), ((3, 4, 5), np.s_[2, :, 1:])]:
        cases.append(("slice", lambda xx, index=index: (xx[index] * xx[index]).sum(), [r(*shape)]))

    return cases


def run_op_suite(seed=0, h=1e-5, tolerance=1e-4):
    """Run the finite-difference suite over the full op inventory."""
    results = []
    counts: dict[str, int] = {}
    for name, build, inputs in op_inventory_cases(seed):
        counts[name] = counts.get(name, 0) + 1
        err = check_op(build, inputs, h=h, seed=seed + counts[name])
        results.append(OpCheckResult(name, counts[name], err, tolerance))
    return results


def check_module_gradients(module, build_loss, h=1e-5, max_coords=4, tolerance=1e-3, seed=0, jitter=0.05):
    """Finite-difference check of d build_loss() / d theta for module params.

    Probes up to max_coords coordinates per parameter tensor. build_loss
    must re-run the full forward pass each call (it closes over the live
    parameter tensors, which are perturbed in place). `jitter` shifts every
    parameter by a small random amount first: zero-initialized biases can
    otherwise sit exactly on the leaky_relu kink (e.g. behind a norm whose
    spatial extent is a single voxel), where the loss is not differentiable
    and central differences straddle the corner.
    """
    rng = np.random.default_rng(seed)
    params = module.named_parameters()
    if jitter:
        for p in params.values():
            p.data = p.data + rng.normal(0.0, jitter, size=p.shape)
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    report = {}
    for name, p in params.items():
        coords = _pick_coords(rng, p.size, max_coords)
        flat = p.data.reshape(-1)
        num = np.zeros(len(coords))
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            fp = float(build_loss().data)
            flat[c] = orig - h
            fm = float(build_loss().data)
            flat[c] = orig
            num[n] = (fp - fm) / (2.0 * h)
        ana = p.grad.reshape(-1)[coords]
        err = max_relative_error(ana, num)
        report[name] = err
        worst = max(worst, err)
    return worst, report
