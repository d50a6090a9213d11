"""Shared test oracles: finite differences, synthetic glyph fixtures.

The finite-difference oracle only ever calls the forward path, so it stays
independent of the backward implementations it checks.
"""

import os

import numpy as np

from glyphforge import ndgrad
from glyphforge.glyphdata import GlyphBitmap, pack, scan_pairs, write_bitmap


def numeric_grad(f, t, eps=1e-5, coords=None):
    """Central finite differences of scalar f() w.r.t. tensor t.

    f must re-run the forward pass from current tensor data. coords limits
    the probe to a subset of flat indices (full tensor when None).
    """
    flat = t.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size, dtype=np.float64)
    for i in idx:
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        out[i] = (up - down) / (2.0 * eps)
    return out.reshape(t.data.shape)


def max_rel_err(analytic, numeric, floor=1.0):
    """max over elements of |a-n| / max(floor, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build, wrt, tol=1e-4, eps=1e-5, max_coords=24, seed=0):
    """Compare backward() gradients of a scalar graph against the FD oracle.

    build() must construct the graph from scratch and return the scalar
    loss tensor; wrt lists the leaf tensors whose data the closure reads.
    Returns the worst relative error across all probed coordinates.

    Central differences are only valid where the graph is smooth within
    +-eps of the probe point; a perturbation that pushes some pre-activation
    across a leaky-relu kink (or a maxpool tie) corrupts the estimate even
    though the analytic gradient is exact. Coordinates that miss tol at the
    primary eps are therefore re-probed at eps/16, which shrinks the stencil
    into the smooth neighborhood: a genuinely wrong gradient keeps failing
    at every eps, a kink artifact vanishes.
    """
    loss = build()
    loss.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(wrt, grads):
        size = t.data.size
        if size > max_coords:
            coords = sorted(rng.choice(size, size=max_coords, replace=False).tolist())
        else:
            coords = list(range(size))
        num = numeric_grad(lambda: build().item(), t, eps=eps, coords=coords).reshape(-1)
        ana = g.reshape(-1)
        suspect = [i for i in coords if max_rel_err(ana[i], num[i]) >= tol]
        if suspect:
            refined = numeric_grad(
                lambda: build().item(), t, eps=eps / 16.0, coords=suspect
            ).reshape(-1)
            for i in suspect:
                num[i] = refined[i]
        worst = max(worst, max_rel_err(ana[coords], num[coords]))
        for x in wrt:
            x.grad = None
    return worst


# -- synthetic glyph fixtures ------------------------------------------------


def synth_glyph(side, seed, thickness=1, shift=0):
    """Procedural stroke glyph: a few thick random segments, ink=0 on 255."""
    rng = np.random.default_rng(seed)
    img = np.full((side, side), 255, dtype=np.uint8)
    margin = max(2, side // 16)
    n_strokes = int(rng.integers(3, 6))
    t = np.linspace(0.0, 1.0, 4 * side)
    for _ in range(n_strokes):
        x0, y0, x1, y1 = rng.integers(margin, side - margin, size=4)
        xs = np.round(x0 + (x1 - x0) * t).astype(int) + shift
        ys = np.round(y0 + (y1 - y0) * t).astype(int) + shift
        for dy in range(-thickness, thickness + 1):
            for dx in range(-thickness, thickness + 1):
                img[np.clip(ys + dy, 0, side - 1), np.clip(xs + dx, 0, side - 1)] = 0
    return img


def glyph_pair(side, seed):
    """(source, target) arrays: same strokes, target thicker and shifted."""
    src = synth_glyph(side, seed, thickness=1)
    tgt = synth_glyph(side, seed, thickness=2, shift=1)
    return src, tgt


def write_glyph(directory, codepoint, array):
    bmp = GlyphBitmap(array.shape[1], array.shape[0], array.reshape(-1), codepoint)
    path = os.path.join(directory, f"{codepoint:04X}.pgm")
    write_bitmap(bmp, path)
    return path


def make_pair_tree(root, codepoints, side, seed=0):
    """Write paired source/target PGM trees; returns the two directories."""
    src_dir = os.path.join(root, "source")
    tgt_dir = os.path.join(root, "target")
    os.makedirs(src_dir, exist_ok=True)
    os.makedirs(tgt_dir, exist_ok=True)
    for i, cp in enumerate(codepoints):
        src, tgt = glyph_pair(side, ndgrad.derive_seed(seed, cp))
        write_glyph(src_dir, cp, src)
        write_glyph(tgt_dir, cp, tgt)
    return src_dir, tgt_dir


DEFECT_CODEPOINTS = {
    "missing_in_target": (0x5B01, 0x5B02),
    "missing_in_source": (0x5B03,),
    "size_mismatch": (0x5B04,),
    "blank_glyph": (0x5B05,),
    "malformed_file": (0x5B06, 0x5B07),
}


def make_defect_tree(root, side=32, n_good=93, seed=7):
    """A tree of n_good valid pairs plus exactly 7 seeded defects.

    Returns (src_dir, tgt_dir, expected_rejections) where the expectation
    maps codepoint -> reason for every defect.
    """
    good = [0x4E00 + i for i in range(n_good)]
    src_dir, tgt_dir = make_pair_tree(root, good, side, seed=seed)
    expected = {}
    for cp in DEFECT_CODEPOINTS["missing_in_target"]:
        write_glyph(src_dir, cp, synth_glyph(side, cp))
        expected[cp] = "missing_in_target"
    for cp in DEFECT_CODEPOINTS["missing_in_source"]:
        write_glyph(tgt_dir, cp, synth_glyph(side, cp))
        expected[cp] = "missing_in_source"
    for cp in DEFECT_CODEPOINTS["size_mismatch"]:
        write_glyph(src_dir, cp, synth_glyph(side, cp))
        write_glyph(tgt_dir, cp, synth_glyph(2 * side, cp))
        expected[cp] = "size_mismatch"
    for cp in DEFECT_CODEPOINTS["blank_glyph"]:
        write_glyph(src_dir, cp, synth_glyph(side, cp))
        write_glyph(tgt_dir, cp, np.full((side, side), 255, dtype=np.uint8))
        expected[cp] = "blank_glyph"
    for cp in DEFECT_CODEPOINTS["malformed_file"]:
        write_glyph(src_dir, cp, synth_glyph(side, cp))
        with open(os.path.join(tgt_dir, f"{cp:04X}.pgm"), "wb") as fh:
            fh.write(b"P2\n4 4\n255\n0 0 0 0\n" if cp % 2 else b"P5\n99 99\n255\nshort")
        expected[cp] = "malformed_file"
    return src_dir, tgt_dir, expected


def make_toy_pack(root, n=8, side=32, seed=0, name="toy.pack"):
    """Scan a synthetic tree and pack it; returns the pack path."""
    codepoints = [0x4E00 + i for i in range(n)]
    src_dir, tgt_dir = make_pair_tree(root, codepoints, side, seed=seed)
    valid, rejected = scan_pairs(src_dir, tgt_dir)
    assert rejected == [] and len(valid) == n
    pairs = []
    from glyphforge.glyphdata import load_bitmap

    for cp in valid:
        pairs.append(
            (
                cp,
                load_bitmap(os.path.join(src_dir, f"{cp:04X}.pgm"), codepoint=cp),
                load_bitmap(os.path.join(tgt_dir, f"{cp:04X}.pgm"), codepoint=cp),
            )
        )
    out = os.path.join(root, name)
    pack(pairs, side, out)
    return out
