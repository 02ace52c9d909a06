# presets/preset_configs.py - constant tables used across the toolkit

# Brain phantom tissue classes. Geometry is given in normalised coordinates
# u (columns) and v (rows), both spanning [-1, 1] over the field of view, v growing downwards.
BRAIN_PHANTOM = {
    "classes": {
        0: {"label": "background", "t2_ms": 0.0, "pd": 0.0},
        1: {"label": "skull-like ring", "t2_ms": 47.0, "pd": 0.40},
        2: {"label": "gray matter", "t2_ms": 83.0, "pd": 0.86},
        3: {"label": "white matter", "t2_ms": 70.0, "pd": 0.77},
        4: {"label": "CSF", "t2_ms": 329.0, "pd": 1.00},
    },
    # painted in order, later shapes overwrite earlier ones
    "layers": [
        {"class": 1, "center": (0.0, 0.0), "axes": (0.86, 0.95)},   # head outline
        {"class": 2, "center": (0.0, 0.0), "axes": (0.80, 0.89)},   # cortex
        {"class": 3, "center": (0.0, 0.0), "axes": (0.66, 0.75)},   # white matter
        {"class": 2, "center": (-0.40, 0.10), "axes": (0.10, 0.14)},  # deep gray nuclei
        {"class": 2, "center": (0.40, 0.10), "axes": (0.10, 0.14)},
        {"class": 4, "center": (-0.17, -0.05), "axes": (0.09, 0.24)},  # lateral ventricles
        {"class": 4, "center": (0.17, -0.05), "axes": (0.09, 0.24)},
        {"class": 4, "center": (0.0, 0.45), "axes": (0.07, 0.07)},     # fourth ventricle
    ],
}

# Fifteen evaluation ROIs placed inside the brain phantom classes.
# center is (u, v) in normalised coordinates, radius as a fraction of the half-width.
EVALUATION_ROIS = [
    {"id": 1, "class": 3, "center": (-0.40, -0.40), "radius": 0.04},
    {"id": 2, "class": 3, "center": (0.40, -0.40), "radius": 0.04},
    {"id": 3, "class": 3, "center": (-0.45, 0.35), "radius": 0.04},
    {"id": 4, "class": 3, "center": (0.45, 0.35), "radius": 0.04},
    {"id": 5, "class": 3, "center": (0.0, -0.50), "radius": 0.04},
    {"id": 6, "class": 2, "center": (0.73, 0.0), "radius": 0.04},
    {"id": 7, "class": 2, "center": (-0.73, 0.0), "radius": 0.04},
    {"id": 8, "class": 2, "center": (0.0, -0.82), "radius": 0.04},
    {"id": 9, "class": 2, "center": (0.0, 0.82), "radius": 0.04},
    {"id": 10, "class": 2, "center": (-0.40, 0.10), "radius": 0.04},
    {"id": 11, "class": 2, "center": (0.40, 0.10), "radius": 0.04},
    {"id": 12, "class": 4, "center": (-0.17, -0.05), "radius": 0.04},
    {"id": 13, "class": 4, "center": (0.17, -0.05), "radius": 0.04},
    {"id": 14, "class": 4, "center": (0.0, 0.45), "radius": 0.04},
    {"id": 15, "class": 3, "center": (0.0, 0.20), "radius": 0.04},
]

# Echo times of the simulated multi-scan spin-echo reference
SE_REFERENCE_TES_MS = [35.0, 50.0, 70.0, 90.0]

# Guided-filter settings shared by ResNetAPI and EvaluationConfig
DEFAULTS = {
    "guided_filter": {"radius": 15, "eps": 1e-4},
}
