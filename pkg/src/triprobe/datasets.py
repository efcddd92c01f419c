"""Synthetic triplet scenes, a frames-directory loader, and video-level folds.

A synthetic scene carries one instrument glyph (shape+colour encode the
instrument class, interior stripes encode the verb), one target glyph
(shape+colour encode the target class), and a corner texture patch.  The
patch id equals a class-keyed id with probability rho and is drawn
uniformly from the texture id space otherwise, which makes it the spurious
attribute: co-occurring with the class but never part of either object.
Ground-truth core masks (glyph pixels) and spurious masks (patch pixels)
are recorded per example and are disjoint by layout.

On-disk layout mirrors the loader contract:
    root/VIDxx/frames/%06d.png      8-bit RGB, rescaled to [0,1] on load
    root/labels/VIDxx.csv           rows "frame_id,b0,...,b{C-1}"
    root/masks/VIDxx/%06d_core.png  optional 0/255 masks (synthetic only)
    root/triplet_map.txt            the class table
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .triplets import TripletTable, full_product_table


class DataError(ValueError):
    """Malformed dataset directory, label file, or sampling request."""


@dataclass
class Example:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (n_triplets,) uint8
    video_id: str
    frame_id: int
    core_mask: np.ndarray | None = None
    spurious_mask: np.ndarray | None = None
    blacked: bool = False

    def __post_init__(self):
        if self.core_mask is not None and self.spurious_mask is not None:
            if np.logical_and(self.core_mask, self.spurious_mask).any():
                raise DataError(f"{self.video_id}/{self.frame_id}: core and spurious masks overlap")

    @property
    def example_id(self) -> str:
        return f"{self.video_id}/{self.frame_id:06d}"


@dataclass
class Dataset:
    examples: list
    table: TripletTable

    def __len__(self):
        return len(self.examples)

    def images(self) -> np.ndarray:
        return np.stack([ex.image for ex in self.examples])

    def labels(self) -> np.ndarray:
        return np.stack([ex.labels for ex in self.examples])

    def video_ids(self) -> list:
        return sorted({ex.video_id for ex in self.examples})

    def subset(self, video_ids) -> "Dataset":
        wanted = set(video_ids)
        return Dataset([ex for ex in self.examples if ex.video_id in wanted], self.table)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticConfig:
    height: int = 64
    width: int = 112
    n_instruments: int = 3
    n_verbs: int = 2
    n_targets: int = 3
    rho: float = 0.8
    n_spurious_textures: int = 64
    noise: float = 0.02
    glyph_size: int = 18
    glyph_jitter: float = 0.0  # brightness jitter range for glyph colours
    n_videos: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.glyph_size * 2 + 4 > min(self.height, self.width):
            raise ValueError("glyph_size too large for the canvas")

    def table(self) -> TripletTable:
        return full_product_table(self.n_instruments, self.n_verbs, self.n_targets)

    def patch_box(self):
        """Row/col extent of the spurious texture patch (top-left corner)."""
        return self.height // 5, max(4, self.width // 6)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to re-render one scene deterministically."""

    m: int
    instrument: int
    verb: int
    target: int
    inst_pos: tuple
    targ_pos: tuple
    texture_id: int
    noise_seed: int
    inst_gain: float = 1.0  # per-example glyph brightness jitter
    targ_gain: float = 1.0


def _palette(n: int, hue_offset: float, sat: float = 0.85, val: float = 0.95) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb((hue_offset + k / max(n, 1)) % 1.0, sat, val) for k in range(n)]
    return np.asarray(cols, dtype=np.float32)


def _glyph_bits(shape_kind: int, size: int) -> np.ndarray:
    s = size
    rr, cc = np.mgrid[0:s, 0:s]
    centre = (s - 1) / 2.0
    kind = shape_kind % 6
    if kind == 0:  # square
        return np.ones((s, s), dtype=bool)
    if kind == 1:  # disk
        return (rr - centre) ** 2 + (cc - centre) ** 2 <= (s / 2.0) ** 2
    if kind == 2:  # lower-left triangle
        return rr >= cc
    if kind == 3:  # plus
        w = max(2, s // 3)
        return (np.abs(rr - centre) <= w / 2) | (np.abs(cc - centre) <= w / 2)
    if kind == 4:  # ring
        d2 = (rr - centre) ** 2 + (cc - centre) ** 2
        return (d2 <= (s / 2.0) ** 2) & (d2 >= (s / 4.0) ** 2)
    diag = np.abs(rr - centre) + np.abs(cc - centre)  # diamond
    return diag <= s / 2.0


def _verb_stripes(verb: int, size: int) -> np.ndarray:
    """Brightness modulation inside the instrument glyph encoding the verb."""
    period = 3 + 2 * (verb // 2)
    rr, cc = np.mgrid[0:size, 0:size]
    axis = rr if verb % 2 == 0 else cc
    return np.where((axis // period) % 2 == 0, 1.0, 0.45).astype(np.float32)


def _texture_tile(texture_id: int, h: int, w: int) -> np.ndarray:
    """Distinct gray stripe texture per id: 4 orientations x 4 periods x 4
    phases.  Gray with a ~constant mean keeps the patch orthogonal to the
    colour statistics the glyph classes live in, so a model trained with
    class-independent patches can actually ignore them."""
    orient = texture_id % 4
    period = 2 + (texture_id // 4) % 4
    phase = (texture_id // 16) % 4
    rr, cc = np.mgrid[0:h, 0:w]
    axis = (rr, cc, rr + cc, rr - cc)[orient]
    stripe = (((axis + phase) // period) % 2).astype(np.float32)
    tile = np.empty((h, w, 3), dtype=np.float32)
    tile[:] = (0.25 + 0.6 * stripe)[..., None]
    return tile


def render_scene(cfg: SyntheticConfig, spec: SceneSpec):
    """Rasterize a scene; returns (image, core_mask, spurious_mask)."""
    h, w, gs = cfg.height, cfg.width, cfg.glyph_size
    rng = np.random.Generator(np.random.PCG64(spec.noise_seed))
    img = (0.12 + cfg.noise * rng.random((h, w, 3))).astype(np.float32)

    ph, pw = cfg.patch_box()
    img[:ph, :pw] = _texture_tile(spec.texture_id, ph, pw)
    spurious = np.zeros((h, w), dtype=bool)
    spurious[:ph, :pw] = True

    core = np.zeros((h, w), dtype=bool)
    inst_colours = _palette(cfg.n_instruments, hue_offset=0.0)
    targ_colours = _palette(cfg.n_targets, hue_offset=0.5)

    r0, c0 = spec.inst_pos
    bits = _glyph_bits(spec.instrument, gs)
    stripes = _verb_stripes(spec.verb, gs)
    patch = img[r0:r0 + gs, c0:c0 + gs]
    patch[bits] = spec.inst_gain * inst_colours[spec.instrument] * stripes[bits, None]
    core[r0:r0 + gs, c0:c0 + gs] |= bits

    r1, c1 = spec.targ_pos
    bits_t = _glyph_bits(spec.target + 2, gs)
    patch = img[r1:r1 + gs, c1:c1 + gs]
    patch[bits_t] = spec.targ_gain * targ_colours[spec.target]
    core[r1:r1 + gs, c1:c1 + gs] |= bits_t

    return np.clip(img, 0.0, 1.0), core, spurious


def _sample_spec(cfg: SyntheticConfig, table: TripletTable, rng) -> SceneSpec:
    m = int(rng.integers(table.n_triplets))
    i, v, t = (int(x) for x in table.rows[m])
    ph, pw = cfg.patch_box()
    gs = cfg.glyph_size
    # instrument in the left half below the patch, target in the right half
    r0 = int(rng.integers(ph + 2, cfg.height - gs - 1))
    c0 = int(rng.integers(2, cfg.width // 2 - gs - 1))
    r1 = int(rng.integers(2, cfg.height - gs - 1))
    c1 = int(rng.integers(cfg.width // 2 + 2, cfg.width - gs - 1))
    key = m % cfg.n_spurious_textures
    if rng.random() < cfg.rho:
        texture = key
    else:
        texture = int(rng.integers(cfg.n_spurious_textures))
    gains = (float(rng.uniform(1.0 - cfg.glyph_jitter, 1.0)),
             float(rng.uniform(1.0 - cfg.glyph_jitter, 1.0)))
    return SceneSpec(m=m, instrument=i, verb=v, target=t, inst_pos=(r0, c0),
                     targ_pos=(r1, c1), texture_id=texture,
                     noise_seed=int(rng.integers(2 ** 31)),
                     inst_gain=gains[0], targ_gain=gains[1])


def generate_synthetic(cfg: SyntheticConfig, n: int, return_specs: bool = False):
    """Draw n scenes; deterministic for a fixed config (cfg.seed included)."""
    table = cfg.table()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    examples = []
    specs = []
    frame_counter = {}
    for idx in range(n):
        spec = _sample_spec(cfg, table, rng)
        img, core, spurious = render_scene(cfg, spec)
        labels = np.zeros(table.n_triplets, dtype=np.uint8)
        labels[spec.m] = 1
        vid = f"VID{idx * cfg.n_videos // n + 1:02d}"
        fid = frame_counter.get(vid, 0)
        frame_counter[vid] = fid + 1
        examples.append(Example(image=img, labels=labels, video_id=vid, frame_id=fid,
                                core_mask=core, spurious_mask=spurious))
        specs.append(spec)
    ds = Dataset(examples, table)
    return (ds, specs) if return_specs else ds


def spurious_key(cfg: SyntheticConfig, m: int) -> int:
    """The texture id that co-occurs with triplet class m at rate rho."""
    return m % cfg.n_spurious_textures


# ---------------------------------------------------------------------------
# directory IO


def _write_png(path, array_u8):
    Image.fromarray(array_u8).save(path, format="PNG")


def save_frames_dir(dataset: Dataset, root, with_masks: bool = True) -> None:
    """Write the directory layout the loader reads back."""
    from .triplets import save_table

    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    save_table(dataset.table, os.path.join(root, "triplet_map.txt"))
    by_video = {}
    for ex in dataset.examples:
        by_video.setdefault(ex.video_id, []).append(ex)
    for vid, exs in sorted(by_video.items()):
        frames_dir = os.path.join(root, vid, "frames")
        os.makedirs(frames_dir, exist_ok=True)
        mask_dir = os.path.join(root, "masks", vid)
        rows = []
        for ex in sorted(exs, key=lambda e: e.frame_id):
            u8 = np.clip(np.round(ex.image * 255.0), 0, 255).astype(np.uint8)
            _write_png(os.path.join(frames_dir, f"{ex.frame_id:06d}.png"), u8)
            rows.append([ex.frame_id] + ex.labels.astype(int).tolist())
            if with_masks and ex.core_mask is not None:
                os.makedirs(mask_dir, exist_ok=True)
                _write_png(os.path.join(mask_dir, f"{ex.frame_id:06d}_core.png"),
                           ex.core_mask.astype(np.uint8) * 255)
                _write_png(os.path.join(mask_dir, f"{ex.frame_id:06d}_spurious.png"),
                           ex.spurious_mask.astype(np.uint8) * 255)
        with open(os.path.join(root, "labels", f"{vid}.csv"), "w", newline="") as fh:
            csv.writer(fh).writerows(rows)


def _load_mask(path):
    if not os.path.exists(path):
        return None
    return np.asarray(Image.open(path)) > 127


def load_frames_dir(root, table: TripletTable) -> Dataset:
    """Load examples from the directory layout; marks all-black frames."""
    if not os.path.isdir(root):
        raise DataError(f"{root}: not a directory")
    videos = sorted(d for d in os.listdir(root)
                    if os.path.isdir(os.path.join(root, d, "frames")))
    if not videos:
        raise DataError(f"{root}: no VIDxx/frames directories found")
    examples = []
    for vid in videos:
        label_path = os.path.join(root, "labels", f"{vid}.csv")
        if not os.path.exists(label_path):
            raise DataError(f"{label_path}: missing label file for {vid}")
        labels = {}
        with open(label_path, newline="") as fh:
            for ln, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != table.n_triplets + 1:
                    raise DataError(
                        f"{label_path}:{ln}: expected frame_id plus {table.n_triplets} "
                        f"label bits, got {len(row)} fields")
                try:
                    fid = int(row[0])
                    bits = np.array([int(b) for b in row[1:]], dtype=np.uint8)
                except ValueError as exc:
                    raise DataError(f"{label_path}:{ln}: non-integer field") from exc
                if not np.isin(bits, (0, 1)).all():
                    raise DataError(f"{label_path}:{ln}: labels must be 0/1")
                labels[fid] = bits
        frames_dir = os.path.join(root, vid, "frames")
        for fname in sorted(os.listdir(frames_dir)):
            if not fname.endswith(".png"):
                continue
            fid = int(os.path.splitext(fname)[0])
            if fid not in labels:
                raise DataError(f"{label_path}: no label row for frame {fid} of {vid}")
            u8 = np.asarray(Image.open(os.path.join(frames_dir, fname)).convert("RGB"))
            img = (u8.astype(np.float32) / 255.0)
            examples.append(Example(
                image=img, labels=labels[fid], video_id=vid, frame_id=fid,
                core_mask=_load_mask(os.path.join(root, "masks", vid, f"{fid:06d}_core.png")),
                spurious_mask=_load_mask(os.path.join(root, "masks", vid, f"{fid:06d}_spurious.png")),
                blacked=bool(u8.max() == 0)))
    return Dataset(examples, table)


# ---------------------------------------------------------------------------
# splits and attack sampling


def kfold_split(video_ids, k: int, seed: int) -> list:
    """Partition video ids into k near-equal folds (sizes differ by <= 1)."""
    vids = sorted(set(video_ids))
    if not 1 <= k <= len(vids):
        raise DataError(f"k={k} invalid for {len(vids)} videos")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [vids[i] for i in rng.permutation(len(vids))]
    return [sorted(chunk) for chunk in np.array_split(np.array(order, dtype=object), k)]


def train_val_test_videos(folds, test_fold: int, n_val: int = 5, val_videos=None):
    """Pick the test fold and carve validation videos out of the train folds.

    Default validation choice: the last n_val of the sorted training ids.
    """
    if not 0 <= test_fold < len(folds):
        raise DataError(f"test_fold {test_fold} out of range for {len(folds)} folds")
    test = list(folds[test_fold])
    train = sorted(v for f_idx, fold in enumerate(folds) if f_idx != test_fold for v in fold)
    if val_videos is None:
        val = train[-n_val:] if n_val else []
    else:
        val = sorted(val_videos)
        missing = set(val) - set(train)
        if missing:
            raise DataError(f"validation videos {sorted(missing)} not in the training folds")
    train = [v for v in train if v not in set(val)]
    return train, val, test


def sample_attack_set(dataset: Dataset, n: int, seed: int) -> list:
    """n distinct non-blacked examples with exactly one positive label."""
    qualifying = [ex for ex in dataset.examples
                  if not ex.blacked and int(ex.labels.sum()) == 1]
    if len(qualifying) < n:
        raise DataError(
            f"only {len(qualifying)} single-label examples available, {n} requested")
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = rng.choice(len(qualifying), size=n, replace=False)
    return [qualifying[i] for i in sorted(picked)]
