"""Shared test utilities: random graph generation and small fixtures."""

from __future__ import annotations

import numpy as np

from triprobe import autodiff as ad
from triprobe.autodiff import Tensor


def random_scalar_graph(rng):
    """Build (f, x0) where f maps a flat Tensor to a random scalar graph.

    Depth <= 4, dims <= 8, drawing from the full op set.  Constants are
    baked into the closure; only the input is differentiated.
    """
    as_image = rng.random() < 0.5
    if as_image:
        h = int(rng.integers(4, 7))
        w = int(rng.integers(4, 7))
        c = int(rng.integers(1, 3))
        shape = (1, h, w, c)
    else:
        d = int(rng.integers(2, 9))
        shape = (1, d)
    x0 = rng.uniform(-1.5, 1.5, size=shape)

    layers = []
    cur_shape = shape
    depth = int(rng.integers(1, 5))
    for _ in range(depth):
        if len(cur_shape) == 4:
            n, h, w, c = cur_shape
            choices = ["conv", "gap"]
            if min(h, w) >= 4:
                choices.append("pool")
            kind = rng.choice(choices)
            if kind == "conv":
                co = int(rng.integers(1, 4))
                k = int(rng.choice([1, 3]))
                wgt = rng.standard_normal((k, k, c, co)) * 0.7
                b = rng.standard_normal(co) * 0.3
                nl = rng.choice(["relu", "sigmoid", "softplus", "none"])
                # padding k//2 at stride 1 keeps the spatial size for odd k
                layers.append(("conv", wgt, b, nl))
                cur_shape = (n, h, w, co)
            elif kind == "pool":
                layers.append(("pool",))
                cur_shape = (n, (h - 2) // 2 + 1, (w - 2) // 2 + 1, c)
            else:
                layers.append(("gap",))
                cur_shape = (n, c)
        else:
            n, d = cur_shape
            kind = rng.choice(["dense", "mul", "addbias"])
            if kind == "dense":
                do = int(rng.integers(1, 9))
                wgt = rng.standard_normal((d, do)) * 0.7
                b = rng.standard_normal(do) * 0.3
                nl = rng.choice(["relu", "sigmoid", "softplus", "none"])
                layers.append(("dense", wgt, b, nl))
                cur_shape = (n, do)
            elif kind == "mul":
                layers.append(("mul", rng.standard_normal(cur_shape)))
            else:
                layers.append(("addbias", rng.standard_normal(d) * 0.5))
    reducer = rng.choice(["sum", "mean", "max"])

    def apply_nl(t, nl):
        return {"relu": ad.relu, "sigmoid": ad.sigmoid, "softplus": ad.softplus,
                "none": lambda z: z}[nl](t)

    def f(t: Tensor) -> Tensor:
        cur = ad.reshape(t, shape)
        for layer in layers:
            if layer[0] == "conv":
                _, wgt, b, nl = layer
                cur = apply_nl(ad.conv2d(cur, Tensor(wgt.astype(cur.data.dtype)),
                                         Tensor(b.astype(cur.data.dtype)),
                                         stride=1, padding=layer[1].shape[0] // 2), nl)
            elif layer[0] == "pool":
                cur = ad.max_pool2d(cur, 2, 2)
            elif layer[0] == "gap":
                cur = ad.global_avg_pool(cur)
            elif layer[0] == "dense":
                _, wgt, b, nl = layer
                cur = apply_nl(ad.dense(cur, Tensor(wgt.astype(cur.data.dtype)),
                                        Tensor(b.astype(cur.data.dtype))), nl)
            elif layer[0] == "mul":
                cur = ad.mul(cur, Tensor(layer[1].astype(cur.data.dtype)))
            elif layer[0] == "addbias":
                cur = ad.bias_add(cur, Tensor(layer[1].astype(cur.data.dtype)))
        flat = ad.reshape(cur, (1, int(np.prod(cur.data.shape))))
        if reducer == "sum":
            return ad.reduce_sum(flat)
        if reducer == "mean":
            return ad.reduce_mean(flat)
        return ad.reduce_sum(ad.reduce_max(flat, axis=1))

    return f, x0.reshape(-1)


def tiny_model(seed=0, h=16, w=16):
    from triprobe.model import ModelConfig, TripletNet

    cfg = ModelConfig(height=h, width=w, conv_widths=(4, 6, 8), branch_width=5,
                      n_instruments=3, n_verbs=2, n_targets=3, n_triplets=12,
                      init_seed=seed)
    return TripletNet(cfg)
