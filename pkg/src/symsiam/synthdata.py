"""Synthetic bilateral phantoms, registration, grid pair sampling and splits.

A case is a left/right image pair showing the same smooth tissue texture
mirrored, with independent pixel noise, a small planted misalignment on the
right side and optional bright blob lesions on one side. Images are
``(height, width)`` float arrays in [0, 1] with background exactly 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import correlate

from .errors import ConfigError, DataError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
GRADE_NAMES = {0: "background", 1: "low_contrast", 2: "high_contrast"}


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    x_max: int
    y_min: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Lesion:
    side: str  # "left" or "right"
    bbox: BBox
    grade: int  # 1 = low contrast, 2 = high contrast
    contrast: float


@dataclass
class SynthConfig:
    n_cases: int = 200
    height: int = 256
    width: int = 192
    patch_size: int = 32
    lesion_prob: float = 0.6
    max_lesions: int = 2
    lesion_radius: tuple[int, int] = (6, 12)
    lesion_contrast: float = 0.35
    low_grade_factor: float = 0.5
    texture_sigma: float = 4.0
    texture_amplitude: float = 0.04
    mirror_noise: float = 0.02
    max_misalignment: int = 3
    max_shift: int = 8
    use_breast_mask: bool = True
    leakage_guard: bool = True
    seed: int = 17

    def __post_init__(self):
        self.lesion_radius = tuple(int(r) for r in self.lesion_radius)
        s = self.patch_size
        if s < 4 or self.height % s or self.width % s:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by patch size {s}")
        if not 0.0 <= self.lesion_prob <= 1.0:
            raise ConfigError("lesion_prob must lie in [0, 1]")
        lo, hi = self.lesion_radius
        if not 1 <= lo <= hi:
            raise ConfigError("lesion_radius must be an increasing pair of positive ints")
        if self.max_misalignment > self.max_shift:
            raise ConfigError("max_misalignment cannot exceed the registration search range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_radius"] = list(self.lesion_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class PhantomCase:
    case_id: int
    left: np.ndarray
    right: np.ndarray
    lesions: list[Lesion]
    planted_shift: tuple[int, int]


@dataclass
class RegisteredCase:
    """Both images in the frame of the fixed (lesion-bearing) image.

    Pixels outside the common foreground are zeroed in both images; the
    foreground masks from before that step are kept for tile filtering.
    """

    case_id: int
    left: np.ndarray
    right: np.ndarray
    lesions: list[Lesion]
    fixed_side: str
    shift: tuple[int, int]
    fg_left: np.ndarray | None = None
    fg_right: np.ndarray | None = None


@dataclass
class PatchPair:
    pair_id: int
    case_id: int
    row: int
    col: int
    size: int
    A: float
    split: str = ""
    p1: np.ndarray | None = field(default=None, repr=False)
    p2: np.ndarray | None = field(default=None, repr=False)

    @property
    def x0(self) -> int:
        return self.col * self.size

    @property
    def y0(self) -> int:
        return self.row * self.size


# ---------------------------------------------------------------------------
# geometry


def abnormal_area(patch: BBox, roi: BBox) -> float:
    """Overlap of ``patch`` and ``roi`` divided by the smaller of their areas.

    Returns 0 unless both the x and y overlaps are positive.
    """
    if not isinstance(patch, BBox) or not isinstance(roi, BBox):
        raise TypeError("abnormal_area expects BBox arguments")
    dx = min(patch.x_max, roi.x_max) - max(patch.x_min, roi.x_min)
    dy = min(patch.y_max, roi.y_max) - max(patch.y_min, roi.y_min)
    if dx <= 0 or dy <= 0:
        return 0.0
    return dx * dy / min(patch.area, roi.area)


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate so that ``out[y + dy, x + dx] = img[y, x]``, zero fill."""
    h, w = img.shape
    out = np.zeros_like(img)
    ys_out = slice(max(dy, 0), h + min(dy, 0))
    xs_out = slice(max(dx, 0), w + min(dx, 0))
    ys_in = slice(max(-dy, 0), h + min(-dy, 0))
    xs_in = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys_out, xs_out] = img[ys_in, xs_in]
    return out


def breast_mask(height: int, width: int, enabled: bool = True) -> np.ndarray:
    """Half-ellipse attached to the chest wall at x = 0."""
    if not enabled:
        return np.ones((height, width), dtype=bool)
    yy, xx = np.mgrid[0:height, 0:width]
    cy = (height - 1) / 2.0
    ry = 0.47 * height
    rx = 0.92 * width
    return ((yy - cy) / ry) ** 2 + (xx / rx) ** 2 <= 1.0


# ---------------------------------------------------------------------------
# generation


def _lesion_blob(shape, cx: int, cy: int, radius: int, contrast: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = radius / 2.0
    return contrast * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))


def _place_lesions(rng, mask: np.ndarray, count: int, cfg: SynthConfig, side: str):
    h, w = mask.shape
    lesions = []
    for _ in range(count):
        for _attempt in range(100):
            r = int(rng.integers(cfg.lesion_radius[0], cfg.lesion_radius[1] + 1))
            cx = int(rng.integers(r, w - r))
            cy = int(rng.integers(r, h - r))
            box = BBox(cx - r, cx + r + 1, cy - r, cy + r + 1)
            corners = mask[[box.y_min, box.y_min, box.y_max - 1, box.y_max - 1],
                           [box.x_min, box.x_max - 1, box.x_min, box.x_max - 1]]
            if corners.all():
                grade = int(rng.integers(1, 3))
                contrast = cfg.lesion_contrast * (cfg.low_grade_factor if grade == 1 else 1.0)
                lesions.append((Lesion(side, box, grade, contrast), cx, cy, r))
                break
        else:
            return None
    return lesions


def generate_case(case_id: int, config: SynthConfig, seed: int | None = None,
                  planted_shift: tuple[int, int] | None = None) -> PhantomCase:
    """Generate one bilateral case; deterministic in ``(seed, case_id)``."""
    cfg = config
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, case_id])
    h, w = cfg.height, cfg.width

    mask = breast_mask(h, w, cfg.use_breast_mask)
    field_ = gaussian_filter(rng.standard_normal((h, w)), cfg.texture_sigma, mode="reflect")
    field_ /= field_.std() + 1e-12
    # density falls off towards the skin line
    xx = np.arange(w)[None, :] / w
    base = 0.5 - 0.15 * xx + cfg.texture_amplitude * field_

    if planted_shift is None:
        m = cfg.max_misalignment
        planted_shift = (int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
    dx, dy = planted_shift

    noise_l = cfg.mirror_noise * rng.standard_normal((h, w))
    noise_r = cfg.mirror_noise * rng.standard_normal((h, w))

    left_tissue = base
    left_mask = mask
    right_tissue = np.fliplr(shift_image(base, dx, dy))
    right_mask = np.fliplr(shift_image(mask.astype(np.uint8), dx, dy)).astype(bool)

    lesions: list[Lesion] = []
    blobs = {"left": np.zeros((h, w)), "right": np.zeros((h, w))}
    if rng.uniform() < cfg.lesion_prob:
        side = "left" if rng.uniform() < 0.5 else "right"
        count = int(rng.integers(1, cfg.max_lesions + 1))
        side_mask = left_mask if side == "left" else right_mask
        placed = None
        while count > 0:
            placed = _place_lesions(rng, side_mask, count, cfg, side)
            if placed is not None:
                break
            count -= 1
        for lesion, cx, cy, r in placed or []:
            lesions.append(lesion)
            blobs[side] += _lesion_blob((h, w), cx, cy, r, lesion.contrast)

    def finish(tissue, noise, blob, m):
        img = np.clip(tissue + noise + blob, 1e-3, 1.0)
        return np.where(m, img, 0.0).astype(np.float32)

    left = finish(left_tissue, noise_l, blobs["left"], left_mask)
    right = finish(right_tissue, noise_r, blobs["right"], right_mask)
    return PhantomCase(case_id, left, right, lesions, (dx, dy))


# ---------------------------------------------------------------------------
# registration


def estimate_shift(fixed: np.ndarray, moving: np.ndarray, max_shift: int = 8) -> tuple[int, int]:
    """Integer displacement (dx, dy) of ``moving`` relative to ``fixed``.

    Exhaustive search over [-max_shift, max_shift]^2 maximizing normalized
    cross-correlation restricted to the overlap of both foregrounds. Shifts
    whose overlap is under half the fixed foreground are not considered.
    Near-ties (within 1e-9) go to the smallest shift norm, then
    lexicographic (dx, dy).
    """
    if fixed.shape != moving.shape:
        raise ConfigError(f"shape mismatch {fixed.shape} vs {moving.shape}")
    s = max_shift
    f = fixed.astype(np.float64)
    m = moving.astype(np.float64)
    fmask = (f > 0).astype(np.float64)
    mmask = (m > 0).astype(np.float64)
    if fmask.sum() < 2:
        return (0, 0)

    def corr(a, kernel):
        # out[a, b] = sum_{y,x} pad(a)[a + y, b + x] * kernel[y, x]; a = s + dy, b = s + dx
        return correlate(np.pad(a, s), kernel, mode="valid", method="fft")

    n = np.rint(corr(mmask, fmask))
    sf = corr(mmask, f)
    sff = corr(mmask, f * f)
    sm = corr(m, fmask)
    smm = corr(m * m, fmask)
    sfm = corr(m, f)
    valid = n >= 0.5 * fmask.sum()
    n_safe = np.maximum(n, 1.0)
    cov = sfm - sf * sm / n_safe
    var_f = np.maximum(sff - sf**2 / n_safe, 0.0)
    var_m = np.maximum(smm - sm**2 / n_safe, 0.0)
    denom = np.sqrt(var_f * var_m)
    valid &= denom > 1e-12
    ncc = np.full(n.shape, -np.inf)
    ncc[valid] = cov[valid] / denom[valid]
    best = ncc.max()
    if not np.isfinite(best):
        return (0, 0)
    cands = []
    for a, b in zip(*np.nonzero(ncc >= best - 1e-9)):
        dy, dx = int(a) - s, int(b) - s
        cands.append((dx * dx + dy * dy, dx, dy))
    _, dx, dy = min(cands)
    return (dx, dy)


def register_pair(fixed: np.ndarray, moving: np.ndarray, max_shift: int = 8):
    """Flip ``moving`` horizontally and translate it onto ``fixed``.

    Returns ``(aligned, (dx, dy))`` where (dx, dy) is the displacement that
    was found and undone.
    """
    flipped = np.fliplr(moving)
    dx, dy = estimate_shift(fixed, flipped, max_shift)
    return shift_image(flipped, -dx, -dy), (dx, dy)


def register_case(case: PhantomCase, max_shift: int = 8) -> RegisteredCase:
    """Register so the lesion-bearing side stays fixed (boxes unaltered)."""
    sides = {les.side for les in case.lesions}
    if len(sides) > 1:
        raise DataError(f"case {case.case_id} has lesions on both sides")
    fixed_side = sides.pop() if sides else "left"
    if fixed_side == "left":
        aligned, shift = register_pair(case.left, case.right, max_shift)
        left, right = case.left, aligned
    else:
        aligned, shift = register_pair(case.right, case.left, max_shift)
        left, right = aligned, case.right
    fg_left, fg_right = left > 0, right > 0
    # shift fill and mask mismatch would otherwise read as bilateral asymmetry
    common = fg_left & fg_right
    left = np.where(common, left, 0).astype(np.float32)
    right = np.where(common, right, 0).astype(np.float32)
    return RegisteredCase(case.case_id, left, right, list(case.lesions), fixed_side, shift,
                          fg_left, fg_right)


# ---------------------------------------------------------------------------
# sampling


def sample_pairs(reg: RegisteredCase, patch_size: int, max_background: float = 0.5,
                 max_disagreement: float = 0.25) -> list[PatchPair]:
    """Non-overlapping grid tiles of both registered images.

    A tile is dropped when either patch is more than ``max_background``
    background, or the two foreground masks disagree on more than
    ``max_disagreement`` of its pixels. ``A`` is the largest abnormal area
    over the case's lesion boxes.
    """
    s = patch_size
    h, w = reg.left.shape
    fg1 = reg.fg_left if reg.fg_left is not None else reg.left > 0
    fg2 = reg.fg_right if reg.fg_right is not None else reg.right > 0
    pairs: list[PatchPair] = []
    for row in range(h // s):
        for col in range(w // s):
            ys, xs = slice(row * s, (row + 1) * s), slice(col * s, (col + 1) * s)
            t1, t2 = fg1[ys, xs], fg2[ys, xs]
            if 1.0 - t1.mean() > max_background or 1.0 - t2.mean() > max_background:
                continue
            if (t1 != t2).mean() > max_disagreement:
                continue
            tile = BBox(col * s, (col + 1) * s, row * s, (row + 1) * s)
            a = max((abnormal_area(tile, les.bbox) for les in reg.lesions), default=0.0)
            pairs.append(PatchPair(len(pairs), reg.case_id, row, col, s, float(a),
                                   p1=reg.left[ys, xs], p2=reg.right[ys, xs]))
    return pairs


def centered_patch_origin(bbox: BBox, size: int, height: int, width: int) -> tuple[int, int]:
    cx = (bbox.x_min + bbox.x_max) // 2
    cy = (bbox.y_min + bbox.y_max) // 2
    x0 = int(np.clip(cx - size // 2, 0, width - size))
    y0 = int(np.clip(cy - size // 2, 0, height - size))
    return x0, y0


# ---------------------------------------------------------------------------
# splits and the on-disk dataset


def split_cases(case_ids, seed: int) -> dict[int, str]:
    """Seeded 8:1:1 partition of case ids into train/val/test."""
    ids = sorted(int(c) for c in case_ids)
    if len(ids) < 10:
        raise DataError(f"need at least 10 cases to split, got {len(ids)}")
    order = np.random.default_rng([seed, 1]).permutation(len(ids))
    n_train = int(round(0.8 * len(ids)))
    n_val = int(round(0.1 * len(ids)))
    out = {}
    for rank, idx in enumerate(order):
        out[ids[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def _patch_level_splits(n: int, seed: int) -> list[str]:
    order = np.random.default_rng([seed, 2]).permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    out = [""] * n
    for rank, idx in enumerate(order):
        out[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def make_splits(cases: list[RegisteredCase], config: SynthConfig) -> dict:
    """Build the manifest body: case splits, grid pairs and labeled patches.

    Labeled patches are lesion-centered crops of the lesion side (label =
    lesion grade) plus the same location on the contralateral image
    (label 0). With ``leakage_guard`` they inherit their case's split;
    otherwise they are split 8:1:1 at patch level.
    """
    case_split = split_cases([c.case_id for c in cases], config.seed)
    s = config.patch_size
    pairs, labeled = [], []
    for reg in sorted(cases, key=lambda c: c.case_id):
        split = case_split[reg.case_id]
        for p in sample_pairs(reg, s):
            pairs.append({
                "pair_id": len(pairs), "case_id": reg.case_id, "row": p.row, "col": p.col,
                "x0": p.x0, "y0": p.y0, "size": s, "A": p.A, "split": split,
            })
        h, w = reg.left.shape
        for les in reg.lesions:
            x0, y0 = centered_patch_origin(les.bbox, s, h, w)
            other = "right" if les.side == "left" else "left"
            other_img = reg.right if other == "right" else reg.left
            if (other_img[y0:y0 + s, x0:x0 + s] > 0).mean() < 0.5:
                continue
            for side, label in ((les.side, les.grade), (other, 0)):
                labeled.append({
                    "patch_id": len(labeled), "case_id": reg.case_id, "side": side,
                    "x0": x0, "y0": y0, "size": s, "label": label,
                    "label_name": GRADE_NAMES[label], "split": split,
                })
    if not config.leakage_guard:
        for entry, split in zip(labeled, _patch_level_splits(len(labeled), config.seed)):
            entry["split"] = split
    return {
        "case_splits": {str(k): v for k, v in sorted(case_split.items())},
        "pairs": pairs,
        "labeled_patches": labeled,
    }


def build_cases(config: SynthConfig) -> list[RegisteredCase]:
    return [register_case(generate_case(i, config), config.max_shift) for i in range(config.n_cases)]


def write_dataset(out_dir, config: SynthConfig, cases: list[RegisteredCase] | None = None) -> dict:
    """Write ``manifest.json`` plus one little-endian f32 blob per image."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if cases is None:
        cases = build_cases(config)
    body = make_splits(cases, config)
    case_entries = []
    for reg in sorted(cases, key=lambda c: c.case_id):
        entry = {
            "case_id": reg.case_id,
            "split": body["case_splits"][str(reg.case_id)],
            "height": int(reg.left.shape[0]),
            "width": int(reg.left.shape[1]),
            "fixed_side": reg.fixed_side,
            "shift": list(reg.shift),
            "lesions": [
                {"side": les.side, **asdict(les.bbox), "grade": les.grade, "contrast": les.contrast}
                for les in reg.lesions
            ],
        }
        for side in ("left", "right"):
            name = f"images/case_{reg.case_id:05d}_{side}.f32"
            (out / name).write_bytes(np.ascontiguousarray(getattr(reg, side), dtype="<f4").tobytes())
            entry[f"{side}_blob"] = name
        case_entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "cases": case_entries,
        "pairs": body["pairs"],
        "labeled_patches": body["labeled_patches"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class PairArrays:
    p1: np.ndarray
    p2: np.ndarray
    A: np.ndarray
    pair_ids: np.ndarray
    case_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.A)

    def subset(self, idx) -> "PairArrays":
        return PairArrays(self.p1[idx], self.p2[idx], self.A[idx], self.pair_ids[idx], self.case_ids[idx])


class Dataset:
    """Loaded dataset directory; patches are sliced out of the image blobs."""

    def __init__(self, root, manifest: dict, images: dict[tuple[int, str], np.ndarray]):
        self.root = Path(root) if root is not None else None
        self.manifest = manifest
        self.images = images
        self.config = SynthConfig.from_dict(manifest["config"])

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise DataError(f"no manifest.json in {root}")
        manifest = json.loads(path.read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported dataset format version {manifest.get('format_version')}")
        images = {}
        for case in manifest["cases"]:
            shape = (case["height"], case["width"])
            for side in ("left", "right"):
                raw = np.fromfile(root / case[f"{side}_blob"], dtype="<f4")
                if raw.size != shape[0] * shape[1]:
                    raise DataError(f"image blob size mismatch for case {case['case_id']}")
                images[(case["case_id"], side)] = raw.reshape(shape).astype(np.float32)
        return cls(root, manifest, images)

    @classmethod
    def from_cases(cls, cases: list[RegisteredCase], config: SynthConfig) -> "Dataset":
        """In-memory dataset with the same manifest structure as on disk."""
        body = make_splits(cases, config)
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": config.to_dict(),
            "cases": [{"case_id": c.case_id, "split": body["case_splits"][str(c.case_id)]} for c in cases],
            "pairs": body["pairs"],
            "labeled_patches": body["labeled_patches"],
        }
        images = {}
        for c in cases:
            images[(c.case_id, "left")] = c.left
            images[(c.case_id, "right")] = c.right
        return cls(None, manifest, images)

    def _crop(self, case_id: int, side: str, x0: int, y0: int, size: int) -> np.ndarray:
        return self.images[(case_id, side)][y0:y0 + size, x0:x0 + size]

    def pairs(self, split: str | None = None) -> PairArrays:
        entries = [p for p in self.manifest["pairs"] if split is None or p["split"] == split]
        s = self.config.patch_size
        p1 = np.zeros((len(entries), s, s), dtype=np.float32)
        p2 = np.zeros_like(p1)
        for i, e in enumerate(entries):
            p1[i] = self._crop(e["case_id"], "left", e["x0"], e["y0"], e["size"])
            p2[i] = self._crop(e["case_id"], "right", e["x0"], e["y0"], e["size"])
        return PairArrays(
            p1, p2,
            np.array([e["A"] for e in entries], dtype=np.float64),
            np.array([e["pair_id"] for e in entries], dtype=np.int64),
            np.array([e["case_id"] for e in entries], dtype=np.int64),
        )

    def labeled(self, split: str | None = None, binary: bool = False) -> tuple[np.ndarray, np.ndarray]:
        entries = [p for p in self.manifest["labeled_patches"] if split is None or p["split"] == split]
        s = self.config.patch_size
        x = np.zeros((len(entries), s, s), dtype=np.float32)
        for i, e in enumerate(entries):
            x[i] = self._crop(e["case_id"], e["side"], e["x0"], e["y0"], e["size"])
        y = np.array([e["label"] for e in entries], dtype=np.int64)
        if binary:
            y = (y > 0).astype(np.int64)
        return x, y


def synthesize(config: SynthConfig) -> Dataset:
    return Dataset.from_cases(build_cases(config), config)


def with_overrides(config: SynthConfig, **kw) -> SynthConfig:
    return replace(config, **kw)
