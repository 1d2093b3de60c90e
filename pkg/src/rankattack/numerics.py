"""Pixel-domain primitives shared by every other module.

Images are float32 arrays of shape (channels, height, width) with values in
[0, 1]. Randomness everywhere comes from numpy's PCG64 generator so that a
64-bit seed fully determines a run.
"""

import numpy as np

GRID_LEVELS = 255.0


def make_rng(seed):
    """Seeded PCG64 generator. Same seed, same stream, on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(master_seed, count):
    """Derive `count` independent child seeds from one master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(count)]


def gaussian_direction(rng, shape):
    """Draw an i.i.d. standard normal array and scale it to unit L2 norm.

    The norm of a standard normal vector is zero with probability zero, but
    guard anyway by redrawing.
    """
    if len(shape) == 0 or any(int(d) <= 0 for d in shape):
        raise ValueError(f"direction shape must have positive dims, got {shape}")
    while True:
        v = rng.standard_normal(shape)
        n = np.linalg.norm(v)
        if n > 0.0:
            return v / n


def linf_clip_project(original, candidate, epsilon):
    """Project candidate into the L-inf ball of radius epsilon around original,
    then clamp to the valid pixel range [0, 1].
    """
    original = np.asarray(original)
    candidate = np.asarray(candidate)
    if original.shape != candidate.shape:
        raise ValueError(
            f"shape mismatch: original {original.shape} vs candidate {candidate.shape}"
        )
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    lo = original - epsilon
    hi = original + epsilon
    out = np.minimum(np.maximum(candidate, lo), hi)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def quantize_to_grid(image):
    """Snap every pixel to the 1/255 grid, rounding half away from zero.

    This mirrors the integer conversion a real retrieval frontend applies to
    uploads. Rounding rule matters for determinism: numpy's `round` rounds
    half to even, so do it by hand via floor(|x| + 0.5).
    """
    image = np.asarray(image)
    scaled = image.astype(np.float64) * GRID_LEVELS
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return (rounded / GRID_LEVELS).astype(np.float32)


def grid_aligned_radius(epsilon):
    """Largest multiple of 1/255 that does not exceed epsilon.

    Queried images are quantized, and a quantization step can push a pixel up
    to 1/510 past a bound that is not itself on the grid. Clipping the attack
    iterate to this radius around a grid-aligned reference keeps every queried
    image inside the stated budget exactly.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return np.floor(epsilon * GRID_LEVELS + 1e-12) / GRID_LEVELS
