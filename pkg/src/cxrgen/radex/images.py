"""Procedural 32x32 "chest films" with planted finding motifs.

Image columns follow the radiological convention: the patient's right side is
drawn on the left half of the grid. Motif coordinates below are given for the
right side; ``left`` mirrors them horizontally and ``bilateral`` draws both.
The background (anatomy plus seeded noise) is mirror symmetric, so a right-sided
finding image is the exact mirror of its left-sided twin.

Motifs (amplitude scaled by severity: small 0.6, moderate 0.8, large 1.0)::

    Enlarged Cardiomediastinum  bright bands flanking the upper mediastinum
    Cardiomegaly                bright ellipse over the lower centre
    Lung Lesion                 small round bright nodule, upper lung
    Lung Opacity                checkerboard patch, mid lung
    Edema                       grid-wide haze with fine vertical striping
    Consolidation               dense solid block, lower lung
    Pneumonia                   bright cross, upper-mid lung
    Atelectasis                 horizontal band, lung base
    Pneumothorax                dark apex bounded by a bright pleural line
    Pleural Effusion            bright costophrenic fill with a meniscus
    Pleural Other               thickened lateral chest wall stripe
    Fracture                    broken (offset) rib segments
    Support Devices             vertical tube down the midline with a tip
"""
from __future__ import annotations

import numpy as np

from .findings import LATERAL, NO_FINDING, PATHOLOGIES, FindingSpec, check_consistent

SIZE = 32
SEVERITY_SCALE = {"none": 1.0, "small": 0.6, "moderate": 0.8, "large": 1.0}
NOISE_STD = 0.02

_rows, _cols = np.mgrid[0:SIZE, 0:SIZE]


def _ellipse(cr: float, cc: float, rr: float, rc: float) -> np.ndarray:
    return (((_rows - cr) / rr) ** 2 + ((_cols - cc) / rc) ** 2) <= 1.0


def base_anatomy() -> np.ndarray:
    img = np.full((SIZE, SIZE), 0.15)
    lungs = _ellipse(15.5, 7.5, 12.5, 6.0) | _ellipse(15.5, 23.5, 12.5, 6.0)
    img[lungs] = 0.05
    for r in (6, 10, 14, 18, 22):
        img[r][lungs[r]] += 0.05
    img[2:27, 13:19] = 0.45
    img[28:, :] = 0.5
    return img


_BASE = base_anatomy()


def _right_motif(finding: str) -> np.ndarray:
    m = np.zeros((SIZE, SIZE))
    if finding == "Lung Lesion":
        m[_ellipse(5.0, 8.0, 2.6, 2.6)] = 0.6
    elif finding == "Lung Opacity":
        patch = np.where((_rows + _cols) % 2 == 0, 0.4, 0.15)
        m[14:18, 2:10] = patch[14:18, 2:10]
    elif finding == "Consolidation":
        m[21:26, 4:10] = 0.45
    elif finding == "Pneumonia":
        m[10, 3:10] = 0.5
        m[7:14, 6] = 0.5
    elif finding == "Atelectasis":
        m[19:21, 2:11] = 0.55
    elif finding == "Pneumothorax":
        m[1:10, 1:5] = -0.05
        m[1:10, 5:7] = 0.5
    elif finding == "Pleural Effusion":
        m[26:31, 1:9] = 0.4
        m[25, 1:4] = 0.4
    elif finding == "Pleural Other":
        m[8:21, 0:2] = 0.5
    elif finding == "Fracture":
        m[13:15, 10:13] = 0.6
        m[15:17, 8:11] = 0.6
    else:
        raise ValueError(f"{finding} is not lateral")
    return m


def _central_motif(finding: str) -> np.ndarray:
    m = np.zeros((SIZE, SIZE))
    if finding == "Enlarged Cardiomediastinum":
        m[2:12, 11:13] = 0.35
        m[2:12, 19:21] = 0.35
    elif finding == "Cardiomegaly":
        m[_ellipse(22.0, 15.5, 5.0, 6.5)] = 0.3
    elif finding == "Edema":
        stripes = (np.minimum(_cols, SIZE - 1 - _cols) % 2).astype(float)
        m[:, :] = 0.1 + 0.08 * stripes
    elif finding == "Support Devices":
        m[0:16, 15:17] = 0.5
        m[14:17, 13:19] += 0.25
    else:
        raise ValueError(f"{finding} has no central motif")
    return m


def motif(finding: str, laterality: str) -> np.ndarray:
    """Unscaled additive pattern for one finding."""
    if finding not in LATERAL:
        return _central_motif(finding)
    right = _right_motif(finding)
    if laterality == "left":
        return right[:, ::-1].copy()
    if laterality == "bilateral":
        return right + right[:, ::-1]
    return right


def symmetric_noise(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    half = rng.normal(0.0, NOISE_STD, size=(SIZE, SIZE // 2))
    return np.concatenate([half, half[:, ::-1]], axis=1)


def render_image(findings: list[FindingSpec], seed: int) -> np.ndarray:
    check_consistent(findings)
    img = _BASE + symmetric_noise(seed)
    for spec in findings:
        if spec.finding == NO_FINDING:
            continue
        img = img + SEVERITY_SCALE[spec.severity] * motif(spec.finding, spec.laterality)
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------- matched filter


def _templates() -> dict[str, list[np.ndarray]]:
    """Rows of the pseudo-inverse of the stacked motif variants.

    Each template reads off one motif's coefficient by least squares, so
    overlapping motifs (edema haze under everything else) do not leak into
    each other's responses.
    """
    keys, cols = [], []
    for f in PATHOLOGIES:
        for lat in (("right", "left") if f in LATERAL else ("none",)):
            keys.append(f)
            cols.append(motif(f, lat).ravel())
    pinv = np.linalg.pinv(np.stack(cols, axis=1))
    out: dict[str, list[np.ndarray]] = {}
    for f, row in zip(keys, pinv):
        out.setdefault(f, []).append(row.reshape(SIZE, SIZE))
    return out


_TEMPLATES = _templates()


def motif_responses(image: np.ndarray) -> dict[str, float]:
    """Per-finding matched-filter response; roughly the planted severity scale when present."""
    resid = np.asarray(image) - _BASE
    return {f: max(float(np.sum(resid * t)) for t in temps) for f, temps in _TEMPLATES.items()}


def detect_findings(image: np.ndarray, threshold: float = 0.3) -> set[str]:
    """Planted-finding recovery with one matched filter per motif."""
    found = {f for f, r in motif_responses(image).items() if r > threshold}
    return found or {NO_FINDING}
