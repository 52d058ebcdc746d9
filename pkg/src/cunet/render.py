"""Label overlays on the FLAIR channel, written as binary PPM (P6)."""

import numpy as np

from .errors import ContractViolation

PALETTE = {
    0: (128, 0, 128),  # non-tumor, purple tint
    1: (0, 255, 0),  # necrosis / non-enhancing core
    2: (0, 0, 255),  # edema
    4: (255, 255, 0),  # enhancing tumor
}
ALPHA = 0.5


def grayscale(plane):
    """Min-max scale a plane to 0..255; a constant plane maps to 0."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros(plane.shape)
    return (plane - lo) / (hi - lo) * 255.0


def overlay_rgb(flair, labels, alpha=ALPHA):
    """(h, w, 3) uint8 image: ``(1 - alpha) * gray + alpha * palette[label]``."""
    labels = np.asarray(labels)
    if np.shape(flair) != labels.shape:
        raise ContractViolation(f"image {np.shape(flair)} and labels {labels.shape} differ in shape")
    colors = np.zeros(labels.shape + (3,))
    seen = np.zeros(labels.shape, dtype=bool)
    for label, rgb in PALETTE.items():
        hit = labels == label
        colors[hit] = rgb
        seen |= hit
    if not seen.all():
        raise ContractViolation(f"labels outside {sorted(PALETTE)}: {sorted(set(np.unique(labels[~seen]).tolist()))}")
    gray = grayscale(flair)[..., None]
    return np.rint((1 - alpha) * gray + alpha * colors).astype(np.uint8)


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    # header: four whitespace-separated tokens, then exactly one whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = tokens
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(w), int(h)
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)


def render_overlay(sample, labels, path):
    """Write ``labels`` over the FLAIR plane of ``sample`` to ``path``; returns the RGB array."""
    rgb = overlay_rgb(sample.image[0], labels)
    write_ppm(path, rgb)
    return rgb
