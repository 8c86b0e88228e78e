"""Independent reference implementations used by the tests."""

import itertools

import numpy as np

from vggtocc.geometry import CameraModel, random_rotation


def svd_sigma_min(J):
    return np.linalg.svd(J, compute_uv=False)[..., 1]


def random_cameras_points(n, seed):
    rng = np.random.default_rng(seed)
    cams, pts = [], []
    for _ in range(n):
        W, H = rng.integers(16, 2000, size=2)
        cam = CameraModel(rng.uniform(10, 3000), rng.uniform(10, 3000), rng.uniform(0, W), rng.uniform(0, H),
                          int(W), int(H), random_rotation(rng), rng.normal(0, 5, 3))
        cams.append(cam)
        pts.append(np.array([rng.normal(0, 10), rng.normal(0, 10), rng.uniform(0.05, 80)]))
    return cams, pts


def lovasz_oracle(probs: np.ndarray, labels: np.ndarray) -> float:
    """Lovasz extension by enumerating every subset of voxels.

    For errors m in [0, 1], the extension of F is the integral over t of
    F({i : m_i >= t}); each subset S is that level set for
    t in (max_{j not in S} m_j, min_{i in S} m_i].
    """
    n, C = probs.shape
    vals = []
    for c in range(C):
        fg = labels == c
        if not fg.any():
            continue
        m = np.where(fg, 1 - probs[:, c], probs[:, c])
        total = 0.0
        for r in range(1, n + 1):
            for S in itertools.combinations(range(n), r):
                inside = np.zeros(n, bool)
                inside[list(S)] = True
                hi = m[inside].min()
                lo = m[~inside].max() if (~inside).any() else 0.0
                length = max(0.0, hi - lo)
                if length:
                    total += inside.sum() / (fg | inside).sum() * length
        vals.append(total)
    return float(np.mean(vals))
