"""Scratch: compare GS poisson_blend against a dense solve on random fixtures."""
import numpy as np

from editloop.geometry import PixelBox
from editloop.raster import ImageBuffer, Mask, poisson_blend


def dense_solve(patch, bg, box, mask):
    ys, ye = box.y - 1, box.y + box.h + 1
    xs, xe = box.x - 1, box.x + box.w + 1
    out = bg.pixels.copy()
    src_full = bg.pixels.copy()
    src_full[box.y:box.y + box.h, box.x:box.x + box.w] = patch.pixels
    source = src_full[ys:ye, xs:xe, :3].astype(np.float64)
    bg_win = bg.pixels[ys:ye, xs:xe, :3].astype(np.float64)
    inside = np.zeros((box.h + 2, box.w + 2), dtype=bool)
    inside[1:-1, 1:-1] = mask.values
    idx = -np.ones(inside.shape, dtype=int)
    coords = np.argwhere(inside)
    for k, (i, j) in enumerate(coords):
        idx[i, j] = k
    n = len(coords)
    res = np.empty((box.h, box.w, 3))
    for c in range(3):
        A = np.zeros((n, n))
        b = np.zeros(n)
        for k, (i, j) in enumerate(coords):
            A[k, k] = 4.0
            gp = 4.0 * source[i, j, c]
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                gp -= source[ni, nj, c]
                if inside[ni, nj]:
                    A[k, idx[ni, nj]] = -1.0
                else:
                    b[k] += bg_win[ni, nj, c]
            b[k] += gp
        x = np.linalg.solve(A, b)
        chan = bg_win[1:-1, 1:-1, c].copy()
        for k, (i, j) in enumerate(coords):
            chan[i - 1, j - 1] = x[k]
        res[:, :, c] = chan
    out_region = out[box.y:box.y + box.h, box.x:box.x + box.w]
    solved = np.clip(np.floor(res + 0.5), 0, 255).astype(np.uint8)
    out_region[..., :3][mask.values] = solved[mask.values]
    return ImageBuffer(out)


rng = np.random.default_rng(0)
worst = 0
for trial in range(50):
    big = rng.integers(0, 256, size=(20, 20, 4), dtype=np.uint8)
    big[:, :, 3] = 255
    bg = ImageBuffer(big.copy())
    patch_arr = rng.integers(0, 256, size=(16, 16, 4), dtype=np.uint8)
    patch_arr[:, :, 3] = 255
    patch = ImageBuffer(patch_arr)
    box = PixelBox(2, 2, 16, 16)
    if trial % 3 == 0:
        mask = Mask.full(16, 16)
    elif trial % 3 == 1:
        mask = Mask.full_eroded(16, 16)
    else:
        m = np.zeros((16, 16), dtype=bool)
        x0, y0 = rng.integers(0, 8, 2)
        m[y0:y0 + rng.integers(3, 8), x0:x0 + rng.integers(3, 8)] = True
        mask = Mask(m)
    gs = poisson_blend(patch, bg, box, mask)
    dn = dense_solve(patch, bg, box, mask)
    diff = np.abs(gs.pixels.astype(int) - dn.pixels.astype(int)).max()
    worst = max(worst, diff)
print("worst abs diff over 50 random fixtures:", worst)

# smooth-gradient patches (harder for GS: smooth error modes)
worst2 = 0
for trial in range(20):
    big = np.zeros((20, 20, 4), dtype=np.uint8)
    big[:, :, :3] = rng.integers(0, 256)
    big[:, :, 3] = 255
    bg = ImageBuffer(big)
    gx = np.linspace(0, 255, 16)
    patch_arr = np.zeros((16, 16, 4), dtype=np.uint8)
    patch_arr[:, :, 0] = gx[None, :].astype(np.uint8)
    patch_arr[:, :, 1] = gx[:, None].astype(np.uint8)
    patch_arr[:, :, 2] = rng.integers(0, 256)
    patch_arr[:, :, 3] = 255
    patch = ImageBuffer(patch_arr)
    box = PixelBox(2, 2, 16, 16)
    mask = Mask.full(16, 16)
    gs = poisson_blend(patch, bg, box, mask)
    dn = dense_solve(patch, bg, box, mask)
    diff = np.abs(gs.pixels.astype(int) - dn.pixels.astype(int)).max()
    worst2 = max(worst2, diff)
print("worst abs diff, smooth-gradient fixtures:", worst2)
