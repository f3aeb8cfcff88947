"""Independent oracles and synthetic inputs shared by the unit and acceptance suites."""

from collections import Counter

import numpy as np

from atlasforge.grid import ImageGrid, smooth_array
from atlasforge.transform import BSplineFFD, resample_intensity, to_field


def boundary_points(mask, spacing):
    """Mask pixels with a 4-neighbour outside the mask or outside the image."""
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    pts.append((x * spacing[0], y * spacing[1]))
                    break
    return np.array(pts)


def hausdorff_oracle(a, b, spacing):
    pa, pb = boundary_points(a, spacing), boundary_points(b, spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def random_mask_pair(seed, max_size=32):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, max_size + 1, size=2)
    spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.25, 2.0], size=2))
    a = rng.random((h, w)) < rng.uniform(0.05, 0.6)
    b = rng.random((h, w)) < rng.uniform(0.05, 0.6)
    a[0, 0] = b[-1, -1] = True
    return a, b, spacing


def dice_oracle(a, b, labels):
    h, w = a.shape
    ma = [[a[y, x] in labels for x in range(w)] for y in range(h)]
    mb = [[b[y, x] in labels for x in range(w)] for y in range(h)]
    inter = sum(ma[y][x] and mb[y][x] for y in range(h) for x in range(w))
    total = sum(map(sum, ma)) + sum(map(sum, mb))
    return 1.0 if total == 0 else 2 * inter / total


def vote_oracle(votes):
    """Modal label; ties go to the smallest label."""
    counts = Counter(votes)
    best = max(counts.values())
    return min(l for l, c in counts.items() if c == best)


def ring_truth(size=32):
    yy, xx = np.mgrid[:size, :size]
    rr = np.hypot(xx - (size - 1) / 2, yy - (size - 1) / 2)
    return np.where(rr < size * 0.22, 1, np.where(rr < size * 0.34, 2, 0)).astype(np.uint8)


def noisy_raters(truth, n=5, p=0.1, seed=0):
    """Each rater flips a pixel with probability p to one of the two other labels."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        r = truth.copy()
        flip = rng.random(truth.shape) < p
        r[flip] = (truth[flip] + rng.integers(1, 3, flip.sum())) % 3
        out.append(r)
    return np.stack(out).astype(np.int64)


def textured(shape=(96, 96), seed=0, sigma=3.0):
    rng = np.random.default_rng(seed)
    return ImageGrid(smooth_array(rng.normal(size=shape), sigma) * 100)


def warp_pair(max_disp=3.0, shape=(96, 96), seed=0):
    """(ref, flo, true field) with ref(p) = flo(p + u(p)) for a smooth random u."""
    rng = np.random.default_rng(seed + 100)
    base = textured(shape, seed)
    ffd = BSplineFFD.zeros(base, 16.0)
    cp = rng.normal(size=ffd.control_points.shape)
    fld = to_field(ffd.with_points(cp), base)
    cp *= max_disp / fld.max_norm()
    true = to_field(ffd.with_points(cp), base)
    return resample_intensity(base, true), base, true
