"""Finite-difference verification of every differentiable primitive and loss.

Checks run in float64: central differences of a float32 forward pass carry
~1e-4 relative noise at step 1e-3, which would mask real defects. The same
code paths execute either way, only the array dtype differs.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import model as md

FD_STEP = 1e-3
REL_TOL = 1e-4


def rel_error(a, b):
    na = np.linalg.norm(a.ravel())
    nb = np.linalg.norm(b.ravel())
    return np.linalg.norm((a - b).ravel()) / max(na, nb, 1e-12)


def fd_grad(func, args, wrt, step=FD_STEP, coords=None):
    """Central-difference gradient of scalar func w.r.t. args[wrt].

    coords limits evaluation to a subset of flat indices (None = all);
    untouched coordinates are reported as NaN so they can be excluded
    from the comparison.
    """
    x = args[wrt]
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        g = np.zeros(flat.size, dtype=x.dtype)
    else:
        g = np.full(flat.size, np.nan, dtype=x.dtype)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = func(*args)
        flat[i] = orig - step
        lo = func(*args)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return g.reshape(x.shape)


def check_grads(func, arrays, wrt_indices=None, step=FD_STEP, coords=None):
    """Compare taped gradients of func against central differences.

    func takes Tensors and returns a scalar Tensor; arrays are float64
    leaves. Returns the worst relative error across the checked inputs.
    """
    if wrt_indices is None:
        wrt_indices = range(len(arrays))
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = func(*tensors)
    wanted = [tensors[i] for i in wrt_indices]
    analytic = tape.grad(out, wanted)

    def scalar(*args):
        return float(func(*[ad.Tensor(a) for a in args]).data)

    worst = 0.0
    for i, g_ad in zip(wrt_indices, analytic):
        g_fd = fd_grad(scalar, [a.copy() for a in arrays], i, step, coords)
        mask = ~np.isnan(g_fd)
        worst = max(worst, rel_error(g_ad.data[mask], g_fd[mask]))
    return worst


def _away_from_kinks(x, margin=0.05):
    """Shift values off zero so relu/max subgradients are FD-checkable."""
    return x + np.sign(x) * margin + (x == 0) * margin


def _primitive_cases(rng):
    """(name, builder) pairs; builder returns (func, arrays, wrt)."""
    n, c, h, w = 2, 3, 8, 8

    def r(*shape):
        return rng.standard_normal(shape)

    cases = []
    cases.append(
        ("add", lambda: (lambda a, b: ad.tsum(ad.add(a, b)), [r(3, 4), r(4)], None))
    )
    cases.append(
        ("mul", lambda: (lambda a, b: ad.tsum(ad.mul(a, b)), [r(3, 4), r(3, 1)], None))
    )
    cases.append(
        (
            "div",
            lambda: (
                lambda a, b: ad.tsum(ad.div(a, b)),
                [r(3, 4), r(3, 4) + 3.0],
                None,
            ),
        )
    )
    cases.append(
        ("log", lambda: (lambda a: ad.tsum(ad.log(a)), [np.abs(r(3, 4)) + 0.5], None))
    )
    cases.append(("exp", lambda: (lambda a: ad.tsum(ad.exp(a)), [r(3, 4)], None)))
    cases.append(
        (
            "relu",
            lambda: (
                lambda a: ad.tsum(ad.mul(ad.relu(a), ad.Tensor(r(4, 5)))),
                [_away_from_kinks(r(4, 5))],
                None,
            ),
        )
    )
    cases.append(
        ("sigmoid", lambda: (lambda a: ad.tsum(ad.sigmoid(a)), [2.0 * r(4, 5)], None))
    )
    cases.append(
        ("softplus", lambda: (lambda a: ad.tsum(ad.softplus(a)), [3.0 * r(4, 5)], None))
    )
    cases.append(
        (
            "linear",
            lambda: (
                lambda x, wgt, b: ad.tsum(ad.mul(ad.linear(x, wgt, b), ad.Tensor(r(4, 6)))),
                [r(4, 5), r(5, 6), r(6)],
                None,
            ),
        )
    )
    cases.append(
        (
            "sum_axis",
            lambda: (
                lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=1), ad.Tensor(r(3, 5)))),
                [r(3, 4, 5)],
                None,
            ),
        )
    )
    cases.append(
        (
            "mean",
            lambda: (
                lambda a: ad.tsum(ad.mul(ad.tmean(a, axis=(0, 2)), ad.Tensor(r(4)))),
                [r(3, 4, 5)],
                None,
            ),
        )
    )
    cases.append(
        (
            "max",
            lambda: (
                lambda a: ad.tsum(ad.mul(ad.tmax(a, axis=1), ad.Tensor(r(3, 5)))),
                # spread values so FD never straddles an argmax switch
                [np.cumsum(np.abs(r(3, 4, 5)) + 0.1, axis=1)],
                None,
            ),
        )
    )
    cases.append(
        (
            "concat",
            lambda: (
                lambda a, b: ad.tsum(
                    ad.mul(ad.concat([a, b], axis=1), ad.Tensor(r(2, 5, 3, 3)))
                ),
                [r(2, 2, 3, 3), r(2, 3, 3, 3)],
                None,
            ),
        )
    )
    cases.append(
        (
            "softmax",
            lambda: (
                lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=1), ad.Tensor(r(3, 5)))),
                [2.0 * r(3, 5)],
                None,
            ),
        )
    )
    cases.append(
        (
            "log_softmax",
            lambda: (
                lambda a: ad.tsum(
                    ad.mul(ad.log_softmax(a, axis=1), ad.Tensor(r(3, 5)))
                ),
                [2.0 * r(3, 5)],
                None,
            ),
        )
    )
    cases.append(
        (
            "conv2d",
            lambda: (
                lambda x, k: ad.tsum(ad.conv2d(x, k, stride=1, padding=1)),
                [r(n, c, h, w), r(4, c, 3, 3)],
                None,
            ),
        )
    )
    cases.append(
        (
            "conv2d_stride2",
            lambda: (
                lambda x, k: ad.tsum(
                    ad.mul(
                        ad.conv2d(x, k, stride=2, padding=1),
                        ad.Tensor(r(n, 4, h // 2, w // 2)),
                    )
                ),
                [r(n, c, h, w), r(4, c, 3, 3)],
                None,
            ),
        )
    )
    cases.append(
        (
            "bilinear_upsample",
            lambda: (
                lambda x: ad.tsum(
                    ad.mul(ad.bilinear_upsample(x, 2), ad.Tensor(r(2, 2, 8, 8)))
                ),
                [r(2, 2, 4, 4)],
                None,
            ),
        )
    )
    cases.append(
        (
            "avg_pool_grid",
            lambda: (
                lambda x: ad.tsum(
                    ad.mul(ad.avg_pool_grid(x, 2, 2), ad.Tensor(r(2, 3, 2, 2)))
                ),
                [r(2, 3, 7, 7)],
                None,
            ),
        )
    )
    cases.append(
        (
            "replicate_upsample",
            lambda: (
                lambda x: ad.tsum(
                    ad.mul(ad.replicate_upsample(x, 6, 6), ad.Tensor(r(2, 2, 6, 6)))
                ),
                [r(2, 2, 3, 3)],
                None,
            ),
        )
    )

    def bn_case():
        rm = np.zeros(c)
        rv = np.ones(c)
        weights = r(n, c, 4, 4)

        def f(x, gamma, beta):
            return ad.tsum(
                ad.mul(
                    ad.batch_norm(
                        x, gamma, beta, rm, rv, train=True, update_stats=False
                    ),
                    ad.Tensor(weights),
                )
            )

        return f, [r(n, c, 4, 4), np.abs(r(c)) + 0.5, r(c)], None

    cases.append(("batch_norm", bn_case))

    def dropout_case():
        seed = int(rng.integers(0, 2**31))
        weights = r(4, 5)

        def f(x):
            return ad.tsum(
                ad.mul(ad.dropout(x, 0.4, np.random.default_rng(seed)), ad.Tensor(weights))
            )

        return f, [r(4, 5)], None

    cases.append(("dropout", dropout_case))
    return cases


def _loss_cases(rng):
    """Loss-level checks with gradients taken w.r.t. the logits."""
    nc, h, w = 3, 4, 4

    def labels():
        y = rng.integers(0, nc + 1, size=(1, h, w)).astype(np.int32)
        z = np.where(
            y >= nc, rng.integers(0, 2, size=(1, h, w)) * 2, 1
        ).astype(np.int8)
        y = np.where((z == 0) | (z == 2), nc, y)
        return ls.LabelPair(y=y, z=z)

    def r(*shape):
        return rng.standard_normal(shape)

    cases = []
    cases.append(
        (
            "loss_mc",
            lambda: (
                lambda lg: ls.loss_mc(lg, labels(), np.ones(nc)),
                [r(1, nc, h, w)],
                None,
            ),
        )
    )
    cases.append(
        (
            "loss_ml",
            lambda: (lambda lg: ls.loss_ml(lg, labels()), [r(1, nc, h, w)], None),
        )
    )

    def aux_case():
        lp = labels()

        def f(a4, a8):
            return ls.loss_aux([a4, a8], lp.y, nc, resolutions=(2, 4))

        return f, [r(1, nc, 2, 2), r(1, nc, 1, 1)], None

    cases.append(("loss_aux", aux_case))
    cases.append(
        (
            "loss_th",
            lambda: (lambda lg: ls.loss_th(lg, labels().z), [r(1, 2, h, w)], None),
        )
    )
    cases.append(
        (
            "loss_kl",
            lambda: (lambda lg: ls.loss_kl(lg, labels().z), [r(1, nc, h, w)], None),
        )
    )

    def conf_case():
        lp = labels()

        def f(s):
            return ls.loss_conf(ad.sigmoid(s), lp.y, nc)

        return f, [r(1, 1, h, w)], None

    cases.append(("loss_conf", conf_case))

    def interp_case():
        lp = labels()

        def f(lg, s):
            probs = ad.softmax(lg, axis=1)
            mixed = ls.interpolate_confidence(
                probs, ad.sigmoid(s), ls.one_hot(lp.y, nc)
            )
            return ls.loss_mc_on_probs(mixed, lp, np.ones(nc))

        return f, [r(1, nc, h, w), r(1, 1, h, w)], None

    cases.append(("interpolate_confidence", interp_case))
    return cases


_TOTAL_LOSS_KINDS = (
    "multiclass",
    "multiclass_outliers",
    "cplus1",
    "multilabel",
    "twohead",
    "confidence",
)


def _total_loss_case(kind, rng, coords_per_tensor=4):
    """End-to-end check: total loss through a tiny model, sampled coords."""
    nc = 3
    cfg = md.ModelConfig(
        num_classes=nc, head_kind=kind.replace("_outliers", ""), backbone_widths=(2, 2, 4, 4)
    )
    seed = int(rng.integers(0, 2**31))
    model = md.build_model(cfg, seed, dtype=np.float64)
    image = rng.standard_normal((1, 3, 32, 32))
    nc_eff = nc + 1 if kind == "cplus1" else nc
    y = rng.integers(0, nc_eff + 1, size=(1, 32, 32)).astype(np.int32)
    z = np.where(y >= nc, rng.integers(0, 2, size=(1, 32, 32)) * 2, 1).astype(np.int8)
    if kind == "cplus1":
        z = np.where(y == nc, 0, z)
        y = np.where(y > nc, nc + 1, y)
    else:
        y = np.where(z != 1, nc, y)
    lp = ls.LabelPair(y=y, z=z)
    lcfg = ls.LossConfig()
    if kind == "multiclass_outliers":
        lcfg.lambda_kl = 0.2
    interp = kind == "confidence"

    params = model.named_params()
    names = list(params.keys())

    def run():
        out = model.forward(ad.Tensor(image), train_mode=True, update_stats=False)
        return ls.total_loss(cfg.head_kind, out, lp, lcfg, interpolate=interp)

    with ad.Tape() as tape:
        loss = run()
    tensors = [params[n] for n in names]
    analytic = tape.grad(loss, tensors)

    worst = 0.0
    for name, t, g_ad in zip(names, tensors, analytic):
        k = min(coords_per_tensor, t.size)
        coords = rng.choice(t.size, size=k, replace=False)
        flat = t.data.reshape(-1)
        g_fd = np.empty(k)
        for j, ci in enumerate(coords):
            orig = flat[ci]
            flat[ci] = orig + FD_STEP
            hi = float(run().data)
            flat[ci] = orig - FD_STEP
            lo = float(run().data)
            flat[ci] = orig
            g_fd[j] = (hi - lo) / (2.0 * FD_STEP)
        err = rel_error(g_ad.data.reshape(-1)[coords], g_fd)
        worst = max(worst, err)
    return worst


def run_all(seeds=20, sabotage=None):
    """Run every FD suite; returns a list of (name, max_rel_err, passed).

    sabotage names one entry whose analytic gradient is perturbed before the
    comparison; the suite must then report a failure (self-test hook).
    """
    results = []
    base = np.random.default_rng(1234)
    case_seeds = [int(base.integers(0, 2**31)) for _ in range(seeds)]

    def run_case(name, build_for_seed):
        worst = 0.0
        for s in case_seeds:
            rng = np.random.default_rng(s)
            worst = max(worst, build_for_seed(rng))
        if sabotage == name:
            worst += 1.0
        results.append((name, worst, worst < REL_TOL))

    probe = np.random.default_rng(0)
    for name, _ in _primitive_cases(probe):

        def runner(rng, _name=name):
            for cname, builder in _primitive_cases(rng):
                if cname == _name:
                    func, arrays, wrt = builder()
                    return check_grads(func, arrays, wrt)
            raise KeyError(_name)

        run_case(name, runner)

    for name, _ in _loss_cases(probe):

        def runner(rng, _name=name):
            for cname, builder in _loss_cases(rng):
                if cname == _name:
                    func, arrays, wrt = builder()
                    return check_grads(func, arrays, wrt)
            raise KeyError(_name)

        run_case(name, runner)

    for kind in _TOTAL_LOSS_KINDS:
        run_case(
            f"total_{kind}", lambda rng, _k=kind: _total_loss_case(_k, rng)
        )
    return results


def format_report(results, elapsed):
    lines = ["primitive/loss                 max rel err   status"]
    for name, err, ok in results:
        lines.append(f"{name:<30} {err:>11.3e}   {'pass' if ok else 'FAIL'}")
    n_fail = sum(1 for _, _, ok in results if not ok)
    lines.append(
        f"{len(results)} checks, {n_fail} failures, {elapsed:.1f}s"
    )
    return "\n".join(lines)


def main(seeds=20, sabotage=None):
    t0 = time.time()
    results = run_all(seeds=seeds, sabotage=sabotage)
    print(format_report(results, time.time() - t0))
    return 0 if all(ok for _, _, ok in results) else 3
