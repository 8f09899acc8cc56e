#!/usr/bin/env python3
"""Regenerates crates/uwdiff/src/metrics/oracle_values.rs.

Renders the same integer-recipe fixture images as
crates/uwdiff/src/metrics/fixtures.rs, scores them with independent
implementations (scikit-image for PSNR/SSIM and Lab conversion, scipy for
Sobel), and freezes the expected values as Rust constants.

Usage: python3 tools/oracle_gen.py
"""

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

SIDE = 32
PSNR_CAP = 100.0

# (coeffs[8], modulus, invert) — keep in sync with fixtures.rs
FIXTURE_PAIRS = [
    (([3, 5, 1, 2, 1, 7, 11, 0], 251, False), ([3, 5, 1, 2, 1, 7, 11, 0], 251, False)),
    (([0, 0, 0, 0, 0, 0, 0, 118], 256, False), ([0, 0, 0, 0, 0, 0, 0, 2], 6, False)),
    (([7, 3, 2, 1, 2, 5, 3, 4], 199, True), ([7, 3, 2, 1, 2, 5, 3, 4], 199, False)),
    (([5, 3, 0, 0, 0, 8, 2, 1], 131, False), ([4, 4, 0, 0, 0, 9, 0, 3], 131, False)),
    (([12, 8, 3, 2, 1, 10, 7, 5], 241, False), ([13, 7, 3, 2, 1, 11, 5, 2], 239, False)),
    (([3, 2, 1, 0, 0, 37, 19, 8], 203, False), ([2, 3, 1, 0, 0, 40, 21, 6], 201, False)),
    (([1, 1, 0, 1, 0, 2, 0, 9], 509, False), ([1, 2, 0, 1, 0, 3, 0, 7], 521, False)),
    (([16, 18, 5, 3, 2, 12, 31, 3], 257, False), ([17, 19, 5, 3, 2, 13, 29, 1], 253, False)),
    (([2, 9, 1, 1, 1, 6, 13, 11], 127, True), ([9, 2, 1, 1, 1, 6, 13, 11], 127, False)),
    (([11, 6, 2, 4, 3, 23, 15, 12], 222, False), ([6, 11, 2, 4, 3, 21, 17, 10], 218, False)),
]


def render(recipe):
    (a, b, c, d, e, f, g, h), m, invert = recipe
    img = np.zeros((SIDE, SIDE, 3), dtype=np.float64)
    for y in range(SIDE):
        for x in range(SIDE):
            for ch in range(3):
                raw = (
                    a * x
                    + b * y
                    + c * x * y
                    + d * ((x * x) % 7919)
                    + e * ((y * y) % 104729)
                    + f * ch * ch
                    + g * (x + y) * ch
                    + h
                ) % m
                if invert:
                    raw = m - 1 - raw
                img[y, x, ch] = raw / (m - 1)
    return img


def psnr_ref(pred, ref):
    if np.array_equal(pred, ref):
        return PSNR_CAP
    return min(peak_signal_noise_ratio(ref, pred, data_range=1.0), PSNR_CAP)


def ssim_ref(pred, ref):
    return structural_similarity(
        pred,
        ref,
        channel_axis=2,
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
    )


# ---- UIQM (pinned formulation; scipy supplies the Sobel operator) ----------

def _trimmed_stats(x, alpha=0.1):
    flat = np.sort(x.ravel())
    n = flat.size
    t = int(alpha * n)
    kept = flat[t: n - t]
    mu = kept.mean()
    var = ((x.ravel() - mu) ** 2).sum() / n
    return mu, var


def _uicm(r, g, b):
    mu_rg, var_rg = _trimmed_stats(r - g)
    mu_yb, var_yb = _trimmed_stats((r + g) / 2.0 - b)
    return -0.0268 * np.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * np.sqrt(var_rg + var_yb)


def _eme(ch, block=8):
    k1, k2 = ch.shape[0] // block, ch.shape[1] // block
    total = 0.0
    for by in range(k1):
        for bx in range(k2):
            blk = ch[by * block:(by + 1) * block, bx * block:(bx + 1) * block]
            mx, mn = blk.max(), blk.min()
            if mn > 0:
                total += np.log(mx / mn)
    return 2.0 / (k1 * k2) * total


def _uism(r, g, b):
    out = 0.0
    for wgt, ch in [(0.299, r), (0.587, g), (0.114, b)]:
        sx = ndimage.sobel(ch, axis=1, mode="reflect")
        sy = ndimage.sobel(ch, axis=0, mode="reflect")
        out += wgt * _eme(np.hypot(sx, sy) * ch)
    return out


def _uiconm(gray, block=8):
    k1, k2 = gray.shape[0] // block, gray.shape[1] // block
    total = 0.0
    for by in range(k1):
        for bx in range(k2):
            blk = gray[by * block:(by + 1) * block, bx * block:(bx + 1) * block]
            mx, mn = blk.max(), blk.min()
            if mx + mn > 0 and mx > mn:
                m = (mx - mn) / (mx + mn)
                total += m * np.log(m)
    return -total / (k1 * k2)


def uiqm_ref(img01):
    im = img01 * 255.0
    r, g, b = im[..., 0], im[..., 1], im[..., 2]
    gray = 0.299 * r + 0.587 * g + 0.114 * b
    return 0.0282 * _uicm(r, g, b) + 0.2953 * _uism(r, g, b) + 3.5753 * _uiconm(gray)


# ---- UCIQE (scikit-image Lab; pinned statistics) ---------------------------

def uciqe_ref(img01):
    lab = rgb2lab(img01)
    lhat = lab[..., 0].ravel() / 100.0
    ahat = lab[..., 1].ravel() / 110.0
    bhat = lab[..., 2].ravel() / 110.0
    chroma = np.sqrt(ahat**2 + bhat**2)
    sigma_c = np.sqrt(((chroma - chroma.mean()) ** 2).mean())
    n = lhat.size
    k = max(1, int(0.01 * n + 0.5))
    ls = np.sort(lhat)
    con_l = ls[n - k:].mean() - ls[:k].mean()
    denom = np.sqrt(chroma**2 + lhat**2)
    sat = np.where(denom > 0, chroma / np.where(denom > 0, denom, 1.0), 0.0)
    mu_s = sat.mean()
    return 0.4680 * sigma_c + 0.2745 * con_l + 0.2576 * mu_s


def main():
    checks, psnrs, ssims, uiqms, uciqes = [], [], [], [], []
    for pred_r, ref_r in FIXTURE_PAIRS:
        pred, ref = render(pred_r), render(ref_r)
        checks.append((pred.sum(), ref.sum()))
        psnrs.append(psnr_ref(pred, ref))
        ssims.append(ssim_ref(pred, ref))
        uiqms.append((uiqm_ref(pred), uiqm_ref(ref)))
        uciqes.append((uciqe_ref(pred), uciqe_ref(ref)))

    def fmt(v):
        s = repr(float(v))
        return s if any(c in s for c in ".e") else s + ".0"

    lines = [
        "//! Frozen reference-metric values. Generated by tools/oracle_gen.py;",
        "//! regenerate with `python3 tools/oracle_gen.py` after touching the",
        "//! fixtures or metric definitions. Do not edit by hand.",
        "",
        "/// Pixel sums of each (pred, ref) fixture image.",
        "pub const FIXTURE_CHECKSUMS: [[f64; 2]; 10] = [",
    ]
    for p, r in checks:
        lines.append(f"    [{fmt(p)}, {fmt(r)}],")
    lines += ["];", "", "pub const EXPECTED_PSNR: [f64; 10] = ["]
    for v in psnrs:
        lines.append(f"    {fmt(v)},")
    lines += ["];", "", "pub const EXPECTED_SSIM: [f64; 10] = ["]
    for v in ssims:
        lines.append(f"    {fmt(v)},")
    lines += ["];", "", "/// UIQM of [pred, ref] per fixture pair.", "pub const EXPECTED_UIQM: [[f64; 2]; 10] = ["]
    for p, r in uiqms:
        lines.append(f"    [{fmt(p)}, {fmt(r)}],")
    lines += ["];", "", "/// UCIQE of [pred, ref] per fixture pair.", "pub const EXPECTED_UCIQE: [[f64; 2]; 10] = ["]
    for p, r in uciqes:
        lines.append(f"    [{fmt(p)}, {fmt(r)}],")
    lines += ["];", ""]

    out = "crates/uwdiff/src/metrics/oracle_values.rs"
    with open(out, "w") as fh:
        fh.write("\n".join(lines))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
