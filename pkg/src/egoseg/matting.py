"""Trimap construction, shared-sampling alpha matting, and compositing.

The matte runs in four barriered stages over the trimap's Unknown pixels:
expansion into adjacent known regions, ray-based foreground/background pair
gathering, pair sharing between neighbors, and affinity-weighted smoothing.
Results are independent of intra-stage execution order: each stage reads only
the previous stage's output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import (
    StructuringElement,
    dilate,
    ensure_binary_mask,
    ensure_rgb8,
    erode,
    quantize_u8,
)

TRIMAP_BG = 0
TRIMAP_UNKNOWN = 128
TRIMAP_FG = 255

# Degenerate foreground/background pair cutoff, in squared-norm units.
DEGENERATE_EPS = 1e-6

# Expansion adopts a known label only on a clear color match (see _expand).
_EXPAND_RADIUS = 3
_EXPAND_TOL_SQ = 0.02**2
_EXPAND_SEP_SQ = 0.04**2

# Color affinity bandwidth for the smoothing stage, in [0,1] RGB units.
_SMOOTH_SIGMA_COLOR = 0.1


@dataclass(frozen=True)
class MattingParams:
    """Knobs of the shared-sampling matte; defaults suit batch synthesis."""

    ray_count: int = 16
    search_step: int = 2
    max_search: int = 64
    color_weight: float = 1.0
    distance_weight: float = 0.3
    refine_window: int = 5
    smooth_radius: int = 3

    def __post_init__(self):
        if self.ray_count < 4:
            raise ValueError(f"ray_count must be >= 4, got {self.ray_count}")
        if not (self.max_search >= self.search_step >= 1):
            raise ValueError(
                f"need max_search >= search_step >= 1, got {self.max_search}, {self.search_step}"
            )
        if self.color_weight <= 0 or self.distance_weight <= 0:
            raise ValueError("color_weight and distance_weight must be > 0")
        if self.refine_window < 0 or self.smooth_radius < 0:
            raise ValueError("refine_window and smooth_radius must be >= 0")


def ensure_trimap(tri: np.ndarray, name: str = "trimap") -> np.ndarray:
    if not (isinstance(tri, np.ndarray) and tri.ndim == 2 and tri.dtype == np.uint8):
        raise ValueError(f"{name} must be a uint8 (H, W) array")
    bad = ~np.isin(tri, (TRIMAP_BG, TRIMAP_UNKNOWN, TRIMAP_FG))
    if bad.any():
        raise ValueError(f"{name} contains values other than 0/128/255 ({int(bad.sum())} pixels)")
    return tri


def make_trimap(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """Carve a binary mask into foreground / background / unknown.

    Foreground is the eroded mask, background the complement of the dilated
    mask, and the dilation-minus-erosion rim is unknown; the three regions
    partition the image.
    """
    ensure_binary_mask(mask)
    lo = erode(mask, se)
    hi = dilate(mask, se)
    tri = np.full(mask.shape, TRIMAP_BG, dtype=np.uint8)
    tri[hi == 1] = TRIMAP_UNKNOWN
    tri[lo == 1] = TRIMAP_FG
    return tri


def estimate_alpha_pair(c, f, b, eps: float = DEGENERATE_EPS) -> float:
    """Opacity of color ``c`` on the line from background ``b`` to foreground ``f``.

    Projects c onto the f-b segment and clamps to [0, 1]; when f and b are
    within ``eps`` (squared norm) the projection is undefined and 0.5 is
    returned instead.
    """
    c = np.asarray(c, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fb = f - b
    denom = float(fb @ fb)
    if denom < eps:
        return 0.5
    return float(np.clip((c - b) @ fb / denom, 0.0, 1.0))


def _alpha_project(c: np.ndarray, f: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized :func:`estimate_alpha_pair` over (..., 3) color arrays."""
    fb = f - b
    denom = np.sum(fb * fb, axis=-1)
    num = np.sum((c - b) * fb, axis=-1)
    alpha = np.clip(num / np.maximum(denom, DEGENERATE_EPS), 0.0, 1.0)
    return np.where(denom < DEGENERATE_EPS, 0.5, alpha)


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Blend foreground over background: out = alpha*fg + (1-alpha)*bg.

    Computed per channel in [0, 1] float and quantized once at the end with
    round-half-up, so alpha of exactly 1 or 0 reproduces fg/bg bitwise.
    """
    ensure_rgb8(fg, "fg")
    ensure_rgb8(bg, "bg")
    if fg.shape != bg.shape or alpha.shape != fg.shape[:2]:
        raise ValueError(
            f"dimension mismatch: fg {fg.shape}, bg {bg.shape}, alpha {alpha.shape}"
        )
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    blend = a * (fg.astype(np.float64) / 255.0) + (1.0 - a) * (bg.astype(np.float64) / 255.0)
    return quantize_u8(blend)


def alpha_to_label(alpha: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize an alpha mask: 1 where alpha >= threshold."""
    return (np.asarray(alpha) >= threshold).astype(np.uint8)


def alpha_to_gray8(alpha: np.ndarray) -> np.ndarray:
    """Alpha in [0, 1] -> 8-bit grayscale for PNG persistence."""
    return quantize_u8(alpha)


def gray8_to_alpha(gray: np.ndarray) -> np.ndarray:
    return gray.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# Shared-sampling matte


def shared_sampling_matte(
    img: np.ndarray, trimap: np.ndarray, params: MattingParams = MattingParams()
) -> np.ndarray:
    """Estimate per-pixel alpha for the trimap's Unknown band.

    Known regions keep hard values (foreground 1, background 0). Unknown
    pixels run expansion, gathering, sharing, and smoothing in order.
    """
    ensure_rgb8(img)
    ensure_trimap(trimap)
    if trimap.shape != img.shape[:2]:
        raise ValueError(f"trimap shape {trimap.shape} does not match image {img.shape[:2]}")
    fg_known = trimap == TRIMAP_FG
    bg_known = trimap == TRIMAP_BG
    if not fg_known.any() or not bg_known.any():
        raise ValueError("trimap must contain at least one Foreground and one Background pixel")

    h, w = trimap.shape
    color = img.astype(np.float32) / 255.0
    alpha = np.zeros((h, w), dtype=np.float32)
    alpha[fg_known] = 1.0

    unknown = trimap == TRIMAP_UNKNOWN
    if not unknown.any():
        return alpha

    mean_fg = color[fg_known].mean(axis=0)
    mean_bg = color[bg_known].mean(axis=0)

    # Stage 1: expansion. Unambiguous color matches adopt the nearby label.
    snap_fg, snap_bg = _expand(color, fg_known, bg_known, unknown, mean_fg, mean_bg)
    alpha[snap_fg] = 1.0
    unknown = unknown & ~snap_fg & ~snap_bg

    if unknown.any():
        ys, xs = np.nonzero(unknown)
        # Stage 2: gather candidate pairs along rays.
        f_col, f_pos, b_col, b_pos, score = _gather(
            color, trimap, ys, xs, params, mean_fg, mean_bg
        )
        # Stage 3: share better-scoring pairs between neighbors.
        if params.refine_window // 2 >= 1:
            f_col, f_pos, b_col, b_pos = _share(
                color, unknown, ys, xs, f_col, f_pos, b_col, b_pos, score, params
            )
        a_u = _alpha_project(color[ys, xs], f_col, b_col).astype(np.float32)
        alpha[ys, xs] = a_u
        # Stage 4: affinity-weighted smoothing within the unknown band.
        if params.smooth_radius >= 1:
            alpha[ys, xs] = _smooth(color, unknown, ys, xs, alpha, params)

    alpha[fg_known] = 1.0
    alpha[bg_known] = 0.0
    return np.clip(alpha, 0.0, 1.0)


def _expand(color, fg_known, bg_known, unknown, mean_fg, mean_bg):
    """Snap unknown pixels that clearly match exactly one nearby known region."""
    h, w = unknown.shape
    inf = np.float32(np.inf)
    best_fg = np.full((h, w), inf, dtype=np.float32)
    best_bg = np.full((h, w), inf, dtype=np.float32)
    r = _EXPAND_RADIUS
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            cur = color[ys0:ys1, xs0:xs1]
            nbr = color[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
            dist = np.sum((cur - nbr) ** 2, axis=-1)
            nbr_fg = fg_known[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
            nbr_bg = bg_known[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
            np.minimum(
                best_fg[ys0:ys1, xs0:xs1],
                np.where(nbr_fg, dist, inf),
                out=best_fg[ys0:ys1, xs0:xs1],
            )
            np.minimum(
                best_bg[ys0:ys1, xs0:xs1],
                np.where(nbr_bg, dist, inf),
                out=best_bg[ys0:ys1, xs0:xs1],
            )
    # Pixels with no local sample fall back to the global region mean.
    glob_fg = np.sum((color - mean_fg) ** 2, axis=-1, dtype=np.float32)
    glob_bg = np.sum((color - mean_bg) ** 2, axis=-1, dtype=np.float32)
    eff_fg = np.where(np.isfinite(best_fg), best_fg, glob_fg)
    eff_bg = np.where(np.isfinite(best_bg), best_bg, glob_bg)
    snap_fg = unknown & (eff_fg <= _EXPAND_TOL_SQ) & (eff_bg > _EXPAND_SEP_SQ)
    snap_bg = unknown & (eff_bg <= _EXPAND_TOL_SQ) & (eff_fg > _EXPAND_SEP_SQ)
    return snap_fg, snap_bg


def _pair_scores(c, f_col, f_dist, b_col, b_dist, params):
    """Score = color_weight * chromatic distortion + distance_weight * reach."""
    alpha = _alpha_project(c, f_col, b_col)
    blend = alpha[..., None] * f_col + (1.0 - alpha[..., None]) * b_col
    chrom = np.sqrt(np.sum((c - blend) ** 2, axis=-1))
    reach = (f_dist + b_dist) / float(params.max_search)
    return params.color_weight * chrom + params.distance_weight * reach


def _gather(color, trimap, ys, xs, params, mean_fg, mean_bg, chunk: int = 2048):
    """Stage 2: march rays from each unknown pixel, keep the best (F, B) pair."""
    n = ys.size
    f_col = np.empty((n, 3), dtype=np.float32)
    f_pos = np.empty((n, 2), dtype=np.int32)
    b_col = np.empty((n, 3), dtype=np.float32)
    b_pos = np.empty((n, 2), dtype=np.int32)
    best = np.empty(n, dtype=np.float32)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        out = _gather_chunk(color, trimap, ys[s:e], xs[s:e], params, mean_fg, mean_bg)
        f_col[s:e], f_pos[s:e], b_col[s:e], b_pos[s:e], best[s:e] = out
    return f_col, f_pos, b_col, b_pos, best


def _gather_chunk(color, trimap, ys, xs, params, mean_fg, mean_bg):
    h, w = trimap.shape
    n = ys.size
    rays = params.ray_count
    steps = max(params.max_search // params.search_step, 1)

    # Deterministic per-pixel phase decorrelates neighboring ray fans, which
    # is what makes the sharing stage worthwhile.
    phase = (((xs.astype(np.int64) * 73856093) ^ (ys.astype(np.int64) * 19349663)) & 1023) / 1024.0
    theta = 2.0 * np.pi * (np.arange(rays)[None, :] + phase[:, None]) / rays
    dist = (np.arange(1, steps + 1, dtype=np.float64) * params.search_step)[None, None, :]
    sy = np.rint(ys[:, None, None] + np.sin(theta)[..., None] * dist).astype(np.int64)
    sx = np.rint(xs[:, None, None] + np.cos(theta)[..., None] * dist).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    flat = np.clip(sy, 0, h - 1) * w + np.clip(sx, 0, w - 1)
    state = trimap.ravel()[flat]

    def first_hit(hit):
        idx = np.argmax(hit, axis=2)
        found = np.take_along_axis(hit, idx[..., None], axis=2)[..., 0]
        sel = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
        col = color.reshape(-1, 3)[sel]
        py, px = sel // w, sel % w
        d = np.sqrt((py - ys[:, None]) ** 2 + (px - xs[:, None]) ** 2)
        return col, py, px, d, found

    fg_col, fg_y, fg_x, fg_d, fg_ok = first_hit(valid & (state == TRIMAP_FG))
    bg_col, bg_y, bg_x, bg_d, bg_ok = first_hit(valid & (state == TRIMAP_BG))

    c = color[ys, xs][:, None, None, :]
    scores = _pair_scores(
        c,
        fg_col[:, :, None, :],
        fg_d[:, :, None],
        bg_col[:, None, :, :],
        bg_d[:, None, :],
        params,
    )
    scores = np.where(fg_ok[:, :, None] & bg_ok[:, None, :], scores, np.inf)
    flat_idx = np.argmin(scores.reshape(n, -1), axis=1)
    fi, bi = np.divmod(flat_idx, rays)
    rows = np.arange(n)
    best = scores.reshape(n, -1)[rows, flat_idx].astype(np.float32)

    f_col = fg_col[rows, fi].astype(np.float32)
    f_pos = np.stack([fg_y[rows, fi], fg_x[rows, fi]], axis=1).astype(np.int32)
    b_col = bg_col[rows, bi].astype(np.float32)
    b_pos = np.stack([bg_y[rows, bi], bg_x[rows, bi]], axis=1).astype(np.int32)

    # Pixels whose rays never hit one of the regions fall back to the global
    # mean colors at maximal reach; sentinel position (-1, -1).
    miss = ~np.isfinite(best)
    if miss.any():
        c0 = color[ys, xs][miss]
        fb = np.broadcast_to(mean_fg, c0.shape)
        bb = np.broadcast_to(mean_bg, c0.shape)
        f_col[miss] = fb
        b_col[miss] = bb
        f_pos[miss] = -1
        b_pos[miss] = -1
        a = _alpha_project(c0, fb, bb)
        blend = a[:, None] * fb + (1 - a[:, None]) * bb
        chrom = np.sqrt(np.sum((c0 - blend) ** 2, axis=-1))
        best[miss] = (params.color_weight * chrom + params.distance_weight * 2.0).astype(np.float32)
    return f_col, f_pos, b_col, b_pos, best


def _pair_score_for(c, py, px, f_col, f_pos, b_col, b_pos, params):
    """Re-score a stored pair against a (possibly different) pixel."""
    alpha = _alpha_project(c, f_col, b_col)
    blend = alpha[..., None] * f_col + (1.0 - alpha[..., None]) * b_col
    chrom = np.sqrt(np.sum((c - blend) ** 2, axis=-1))

    def reach(pos):
        d = np.sqrt((pos[..., 0] - py) ** 2 + (pos[..., 1] - px) ** 2)
        return np.where(pos[..., 0] < 0, float(params.max_search), d)

    dist = (reach(f_pos) + reach(b_pos)) / float(params.max_search)
    return params.color_weight * chrom + params.distance_weight * dist


def _share(color, unknown, ys, xs, f_col, f_pos, b_col, b_pos, score, params):
    """Stage 3: adopt a neighbor's stage-2 pair when it scores better here."""
    h, w = unknown.shape
    flat_index = np.full(h * w, -1, dtype=np.int64)
    flat_index[ys * w + xs] = np.arange(ys.size)

    c = color[ys, xs].astype(np.float64)
    pyf = ys.astype(np.float64)
    pxf = xs.astype(np.float64)
    best_score = _pair_score_for(c, pyf, pxf, f_col, f_pos, b_col, b_pos, params)
    new_f_col, new_f_pos = f_col.copy(), f_pos.copy()
    new_b_col, new_b_pos = b_col.copy(), b_pos.copy()

    r = params.refine_window // 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            nidx = flat_index[np.clip(ny, 0, h - 1) * w + np.clip(nx, 0, w - 1)]
            ok &= nidx >= 0
            if not ok.any():
                continue
            rows = np.nonzero(ok)[0]
            src = nidx[rows]
            cand = _pair_score_for(
                c[rows], pyf[rows], pxf[rows], f_col[src], f_pos[src], b_col[src], b_pos[src], params
            )
            better = cand < best_score[rows]
            upd = rows[better]
            srcu = src[better]
            best_score[upd] = cand[better]
            new_f_col[upd] = f_col[srcu]
            new_f_pos[upd] = f_pos[srcu]
            new_b_col[upd] = b_col[srcu]
            new_b_pos[upd] = b_pos[srcu]
    return new_f_col, new_f_pos, new_b_col, new_b_pos


def _smooth(color, unknown, ys, xs, alpha, params):
    """Stage 4: color+spatial weighted average of alpha over the unknown band."""
    h, w = unknown.shape
    sig_s2 = 2.0 * float(max(params.smooth_radius, 1)) ** 2
    sig_c2 = 2.0 * _SMOOTH_SIGMA_COLOR**2

    c = color[ys, xs].astype(np.float64)
    num = alpha[ys, xs].astype(np.float64).copy()  # self term, weight 1
    den = np.ones(ys.size, dtype=np.float64)
    r = params.smooth_radius
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            nyc, nxc = np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)
            ok &= unknown[nyc, nxc]
            if not ok.any():
                continue
            rows = np.nonzero(ok)[0]
            nbr_c = color[nyc[rows], nxc[rows]].astype(np.float64)
            wgt = np.exp(-np.sum((c[rows] - nbr_c) ** 2, axis=-1) / sig_c2) * np.exp(
                -(dy * dy + dx * dx) / sig_s2
            )
            num[rows] += wgt * alpha[nyc[rows], nxc[rows]]
            den[rows] += wgt
    return (num / den).astype(np.float32)
