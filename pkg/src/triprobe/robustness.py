"""Minimum-norm masked perturbation search and its aggregations.

For one correctly-classified example the search finds the smallest p-norm
perturbation, zero outside a feature mask, that flips the predicted class:
an outer bisection over the radius drives projected gradient ascent on the
logit margin inside the masked ball, and every successful direction is
rescaled by a forward-only line search to the smallest flipping multiple.
Examples failing at the radius cap are censored: reported with the cap and
success=False, and excluded from means.

Everything runs batched: one call attacks many examples in lockstep, each
with its own mask, bracket, and restart rng (keyed by example, so results
do not depend on how a set is chunked across workers).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .explain import pixel_mask_to_input, top_fraction_mask


class AttackPreconditionError(ValueError):
    """The example is already misclassified or the mask is empty."""


@dataclass(frozen=True)
class AttackConfig:
    norm: float | str = 2  # 2 or "inf"
    eps_max: float = 16.0
    tol: float = 0.05  # bisection stops when hi - lo <= tol
    steps: int = 40
    step_frac: float | None = None  # ascent step as a fraction of eps; 2.5/steps default
    restarts: int = 3
    clip_pixels: bool = False  # keep x + delta inside [0, 1]
    max_bisect: int = 20
    polish_iters: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.eps_max <= 0 or self.tol <= 0:
            raise ValueError("eps_max and tol must be positive")
        if self.norm not in (2, 2.0, "inf", float("inf")):
            raise ValueError("norm must be 2 or 'inf'")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")

    @property
    def linf(self) -> bool:
        return self.norm in ("inf", float("inf"))


@dataclass
class RobustnessRecord:
    example_id: str
    mask_spec: str
    norm: float | str
    epsilon: float
    success: bool
    delta: np.ndarray
    queries: int


@dataclass
class RobustnessSummary:
    records: list
    mean_epsilon: float  # over successful records only
    n_attacked: int
    n_censored: int
    n_skipped: int  # dropped by the correctly-classified pre-filter
    fraction: float
    which: str
    explainer: str


@dataclass
class RobustnessCurve:
    fractions: list
    mean_relevant: list
    mean_irrelevant: list
    censored_relevant: list
    censored_irrelevant: list
    n_examples: int
    explainer: str


def perturbation_norm(delta: np.ndarray, linf: bool, axis=None) -> np.ndarray:
    d = delta.astype(np.float64)
    if linf:
        return np.abs(d).max(axis=axis)
    return np.sqrt((d ** 2).sum(axis=axis))


def _row_axes(X):
    return tuple(range(1, X.ndim))


def _project(delta, masks, eps_vec, cfg, X=None):
    """Zero off-mask entries and project each row into its own eps ball."""
    delta = delta * masks
    shape = (-1,) + (1,) * (delta.ndim - 1)
    eps = eps_vec.reshape(shape)
    if cfg.linf:
        delta = np.clip(delta, -eps, eps)
    else:
        norms = perturbation_norm(delta, False, axis=_row_axes(delta)).reshape(shape)
        delta = delta * np.minimum(1.0, eps / np.maximum(norms, 1e-12))
    if cfg.clip_pixels and X is not None:
        delta = np.clip(X + delta, 0.0, 1.0) - X
    return delta.astype(np.float32)


def _random_init(rng, mask, eps, cfg):
    if cfg.linf:
        return (rng.uniform(-eps, eps, size=mask.shape) * mask).astype(np.float32)
    v = rng.standard_normal(mask.shape) * mask
    nv = np.sqrt((v ** 2).sum())
    k = max(int(mask.sum()), 1)
    radius = eps * rng.random() ** (1.0 / k)
    return (radius * v / max(nv, 1e-12)).astype(np.float32)


def _margin_and_grad(model, X, y):
    """(max_{m != y} z_m - z_y, its input gradient) from one forward pass."""
    return model.margin_and_grad(X, y)


def _flipped(model, X, y):
    return model.predict_batch(X) != y


def _run_pgd(model, X, y, masks, eps_vec, cfg, seed_keys):
    """One PGD-with-restarts pass at per-row radii.

    Returns (hit, delta, queries): rows with hit=True carry a flipping
    delta inside their ball; queries counts forward evaluations per row.
    """
    n = X.shape[0]
    hit = np.zeros(n, dtype=bool)
    best = np.zeros_like(X)
    queries = np.zeros(n, dtype=np.int64)
    alpha_frac = cfg.step_frac if cfg.step_frac is not None else 2.5 / cfg.steps

    for restart in range(cfg.restarts):
        live = np.flatnonzero(~hit)
        if live.size == 0:
            break
        Xl, yl, ml, el = X[live], y[live], masks[live], eps_vec[live]
        if restart == 0:
            delta = np.zeros_like(Xl)
        else:
            delta = np.stack([
                _random_init(
                    np.random.Generator(np.random.PCG64(
                        np.random.SeedSequence((cfg.seed, int(k), restart)))),
                    ml[j], el[j], cfg)
                for j, k in enumerate(seed_keys[live])])
            delta = _project(delta, ml, el, cfg, Xl)
        active = np.ones(live.size, dtype=bool)
        shape = (-1,) + (1,) * (Xl.ndim - 1)
        for step in range(cfg.steps + 1):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            margins, grads = _margin_and_grad(model, Xl[rows] + delta[rows], yl[rows])
            queries[live[rows]] += 1
            flip = margins > 0
            if flip.any():
                f = rows[flip]
                hit[live[f]] = True
                best[live[f]] = delta[f]
                active[f] = False
                rows = rows[~flip]
                grads = grads[~flip]
            if step == cfg.steps or rows.size == 0:
                continue
            g = grads * masks[live[rows]]
            alpha = (alpha_frac * el[rows]).reshape((-1,) + (1,) * (Xl.ndim - 1))
            if cfg.linf:
                step_dir = np.sign(g)
            else:
                gn = perturbation_norm(g, False, axis=_row_axes(g)).reshape(alpha.shape)
                step_dir = g / np.maximum(gn, 1e-12)
            delta[rows] = delta[rows] + (alpha * step_dir).astype(np.float32)
            delta[rows] = _project(delta[rows], ml[rows], el[rows].astype(np.float64),
                                   cfg, Xl[rows])
    return hit, best, queries


def _polish(model, X, y, deltas, cfg, rows):
    """Shrink flipping directions by bisection on the scale factor."""
    if rows.size == 0:
        return deltas, np.zeros(X.shape[0], dtype=np.int64)
    queries = np.zeros(X.shape[0], dtype=np.int64)
    lo = np.zeros(rows.size)
    hi = np.ones(rows.size)
    shape = (-1,) + (1,) * (X.ndim - 1)
    for _ in range(cfg.polish_iters):
        mid = (lo + hi) / 2.0
        cand = deltas[rows] * mid.reshape(shape).astype(np.float32)
        flip = _flipped(model, X[rows] + cand, y[rows])
        queries[rows] += 1
        hi = np.where(flip, mid, hi)
        lo = np.where(flip, lo, mid)
    deltas = deltas.copy()
    deltas[rows] = deltas[rows] * hi.reshape(shape).astype(np.float32)
    return deltas, queries


def attack_batch(model, X, y, masks, cfg: AttackConfig, example_ids=None,
                 seed_keys=None, mask_spec: str = "") -> list:
    """Minimum-norm search on a batch; one RobustnessRecord per row."""
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.intp)
    masks = np.asarray(masks).astype(np.float32)
    n = X.shape[0]
    if example_ids is None:
        example_ids = [str(i) for i in range(n)]
    if seed_keys is None:
        seed_keys = np.arange(n)
    seed_keys = np.asarray(seed_keys)

    if masks.shape != X.shape:
        raise ValueError(f"masks shape {masks.shape} must match inputs {X.shape}")
    empty = masks.reshape(n, -1).sum(axis=1) == 0
    if empty.any():
        raise AttackPreconditionError(
            f"empty perturbation mask for example {example_ids[int(np.flatnonzero(empty)[0])]}")
    wrong = _flipped(model, X, y)
    if wrong.any():
        raise AttackPreconditionError(
            f"example {example_ids[int(np.flatnonzero(wrong)[0])]} is misclassified at delta=0")

    queries = np.ones(n, dtype=np.int64)  # the precondition forward above
    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    best = np.zeros_like(X)

    hit, delta, q = _run_pgd(model, X, y, masks, np.full(n, cfg.eps_max), cfg, seed_keys)
    queries += q
    rows = np.flatnonzero(hit)
    delta, q = _polish(model, X, y, delta, cfg, rows)
    queries += q
    if rows.size:
        hi[rows] = perturbation_norm(delta[rows], cfg.linf, axis=_row_axes(delta))
        best[rows] = delta[rows]

    for _ in range(cfg.max_bisect):
        active = np.flatnonzero(~np.isnan(hi) & (hi - lo > cfg.tol))
        if active.size == 0:
            break
        mid = (lo[active] + hi[active]) / 2.0
        hit, delta, q = _run_pgd(model, X[active], y[active], masks[active], mid, cfg,
                                 seed_keys[active])
        queries[active] += q
        sub = np.flatnonzero(hit)
        delta, q = _polish(model, X[active], y[active], delta, cfg, sub)
        queries[active] += q
        if sub.size:
            norms = perturbation_norm(delta[sub], cfg.linf, axis=_row_axes(delta))
            better = norms < hi[active[sub]]
            upd = active[sub[better]]
            hi[upd] = norms[better]
            best[upd] = delta[sub[better]]
        lo[active[~hit]] = mid[~hit]

    records = []
    for i in range(n):
        if math.isnan(hi[i]):
            records.append(RobustnessRecord(
                example_id=str(example_ids[i]), mask_spec=mask_spec, norm=cfg.norm,
                epsilon=float(cfg.eps_max), success=False, delta=np.zeros_like(X[i]),
                queries=int(queries[i])))
            continue
        still_flips = bool(_flipped(model, X[i:i + 1] + best[i:i + 1], y[i:i + 1])[0])
        queries[i] += 1
        records.append(RobustnessRecord(
            example_id=str(example_ids[i]), mask_spec=mask_spec, norm=cfg.norm,
            epsilon=float(hi[i]), success=still_flips, delta=best[i].copy(),
            queries=int(queries[i])))
    return records


def min_norm_attack(model, x, y, mask, cfg: AttackConfig, example_id: str = "0") -> RobustnessRecord:
    """Single-example wrapper around the batched search.

    mask may be a 2-D pixel mask (broadcast over channels) or have x's
    full shape.
    """
    x = np.asarray(x, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == x.shape[:-1] and x.ndim == 3:
        mask = pixel_mask_to_input(mask, x.shape[-1])
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} incompatible with input {x.shape}")
    return attack_batch(model, x[None], np.array([int(y)]), mask[None], cfg,
                        example_ids=[example_id])[0]


# ---------------------------------------------------------------------------
# grid-search oracle (tests only: exhaustive over <= 8 masked dimensions)


@dataclass(frozen=True)
class GridConfig:
    eps_max: float = 4.0
    points: int = 21  # per masked dimension, includes 0 when odd
    norm: float | str = 2
    chunk: int = 8192
    max_combos: int = 3_000_000


def brute_force_epsilon(model, x, y, mask, grid: GridConfig) -> float | None:
    """Exhaustive minimal flipping norm over a grid of on-mask perturbations."""
    x = np.asarray(x, dtype=np.float64)
    flat_mask = np.asarray(mask, dtype=bool).reshape(-1)
    dims = np.flatnonzero(flat_mask)
    if dims.size > 8:
        raise ValueError(f"brute_force_epsilon: {dims.size} masked dims exceed the limit of 8")
    n_combos = grid.points ** dims.size
    if n_combos > grid.max_combos:
        raise ValueError(f"grid of {n_combos} combinations exceeds max_combos")
    axis_vals = np.linspace(-grid.eps_max, grid.eps_max, grid.points)
    mesh = np.meshgrid(*([axis_vals] * dims.size), indexing="ij")
    combos = np.stack([m.reshape(-1) for m in mesh], axis=1)  # (P, k)
    linf = grid.norm in ("inf", float("inf"))
    norms = np.abs(combos).max(axis=1) if linf else np.sqrt((combos ** 2).sum(axis=1))
    best = math.inf
    flat_x = x.reshape(-1)
    for lo in range(0, combos.shape[0], grid.chunk):
        chunk = combos[lo:lo + grid.chunk]
        Xb = np.tile(flat_x, (chunk.shape[0], 1))
        Xb[:, dims] += chunk
        flips = model.predict_batch(Xb.reshape((-1,) + x.shape).astype(np.float32)) != y
        if flips.any():
            best = min(best, float(norms[lo:lo + grid.chunk][flips].min()))
    return None if math.isinf(best) else best


# ---------------------------------------------------------------------------
# evaluation over example sets


def _prepare_attack_inputs(model, examples):
    X = np.stack([ex.image for ex in examples]).astype(np.float32)
    labels = np.stack([ex.labels for ex in examples])
    if (labels.sum(axis=1) != 1).any():
        raise AttackPreconditionError("robustness evaluation needs single-label examples")
    y = labels.argmax(axis=1)
    keep = model.predict_batch(X) == y
    return X[keep], y[keep], [ex for ex, k in zip(examples, keep) if k], int((~keep).sum())


def _masks_for(maps, fraction, which, channels):
    masks = []
    for m in maps:
        sr, sbar = top_fraction_mask(m, fraction)
        bits = sr.bits if which == "relevant" else sbar.bits
        masks.append(pixel_mask_to_input(bits, channels))
    return np.stack(masks)


def _chunked_attack(model, X, y, masks, cfg, ids, keys, mask_spec, workers):
    if workers <= 1 or X.shape[0] <= 1:
        return attack_batch(model, X, y, masks, cfg, ids, keys, mask_spec)
    bounds = np.array_split(np.arange(X.shape[0]), workers)
    bounds = [b for b in bounds if b.size]

    def run(b):
        return attack_batch(model, X[b], y[b], masks[b], cfg,
                            [ids[i] for i in b], keys[b], mask_spec)

    with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
        parts = list(pool.map(run, bounds))
    return [rec for part in parts for rec in part]


def robustness_eval(model, examples, attributor, fraction: float, which: str,
                    cfg: AttackConfig, explainer: str = "", workers: int = 1) -> RobustnessSummary:
    """Attack the top-fraction (or complement) feature set of each example.

    examples must be single-label; misclassified ones are dropped (and
    counted).  The attribution target is each example's ground-truth
    class, which equals the prediction after the filter.
    """
    if which not in ("relevant", "irrelevant"):
        raise ValueError("which must be 'relevant' or 'irrelevant'")
    X, y, kept, n_skipped = _prepare_attack_inputs(model, examples)
    if X.shape[0] == 0:
        raise AttackPreconditionError("no correctly-classified single-label examples to attack")
    maps = attributor(model, X, y)
    masks = _masks_for(maps, fraction, which, X.shape[-1])
    ids = [ex.example_id for ex in kept]
    keys = np.arange(X.shape[0])
    spec = f"{explainer or 'attr'}/top{fraction:g}/{which}"
    records = _chunked_attack(model, X, y, masks, cfg, ids, keys, spec, workers)
    eps = [r.epsilon for r in records if r.success]
    return RobustnessSummary(
        records=records,
        mean_epsilon=float(np.mean(eps)) if eps else math.nan,
        n_attacked=len(records),
        n_censored=sum(1 for r in records if not r.success),
        n_skipped=n_skipped,
        fraction=fraction,
        which=which,
        explainer=explainer)


def robustness_curve(model, examples, attributor, fractions, cfg: AttackConfig,
                     explainer: str = "", workers: int = 1) -> RobustnessCurve:
    """Mean minimum norms per top-fraction, for the set and its complement.

    fractions must be ascending in (0, 1]; at 1.0 the relevant set is the
    whole image and the complement is empty, so the irrelevant mean is NaN
    there.  Attributions are computed once and reused across fractions.
    """
    fractions = list(fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if sorted(fractions) != fractions:
        raise ValueError("fractions must be ascending")
    X, y, kept, _ = _prepare_attack_inputs(model, examples)
    if X.shape[0] == 0:
        raise AttackPreconditionError("no correctly-classified single-label examples to attack")
    maps = attributor(model, X, y)
    ids = [ex.example_id for ex in kept]
    keys = np.arange(X.shape[0])
    mean_rel, mean_irr, cens_rel, cens_irr = [], [], [], []
    for frac in fractions:
        for which, means, cens in (("relevant", mean_rel, cens_rel),
                                   ("irrelevant", mean_irr, cens_irr)):
            if frac == 1.0:
                if which == "irrelevant":
                    means.append(math.nan)
                    cens.append(0)
                    continue
                masks = np.ones_like(X, dtype=np.float32)
            else:
                masks = _masks_for(maps, frac, which, X.shape[-1])
            spec = f"{explainer or 'attr'}/top{frac:g}/{which}"
            recs = _chunked_attack(model, X, y, masks, cfg, ids, keys, spec, workers)
            eps = [r.epsilon for r in recs if r.success]
            means.append(float(np.mean(eps)) if eps else math.nan)
            cens.append(sum(1 for r in recs if not r.success))
    return RobustnessCurve(
        fractions=fractions, mean_relevant=mean_rel, mean_irrelevant=mean_irr,
        censored_relevant=cens_rel, censored_irrelevant=cens_irr,
        n_examples=X.shape[0], explainer=explainer)
