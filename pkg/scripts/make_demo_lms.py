#!/usr/bin/env python3
"""Regenerate src/pedrisk/data/lms_demo.psv.

The shipped table is a smooth, demonstration-grade reference: curve shapes
follow pediatric growth-chart conventions (BMI dip around age 5, adiposity
rebound, sex offsets) but the numbers are synthesized from the anchor points
below, not copied from the official CDC release. Anyone running this package
against real patients should import the official CDC data files instead, see
scripts/import_cdc_lms.py.
"""
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "pedrisk" / "data" / "lms_demo.psv"

# BMI-for-age anchors: (age_months, L, M, S)
BMI_ANCHORS = {
    "male": [
        (24, -1.98, 16.57, 0.078),
        (36, -2.30, 16.05, 0.081),
        (48, -2.55, 15.70, 0.086),
        (60, -2.70, 15.45, 0.093),
        (72, -2.76, 15.42, 0.101),
        (84, -2.74, 15.62, 0.110),
        (96, -2.66, 15.96, 0.118),
        (108, -2.54, 16.42, 0.125),
        (120, -2.39, 16.95, 0.130),
        (132, -2.22, 17.55, 0.134),
        (144, -2.05, 18.19, 0.136),
        (156, -1.88, 18.85, 0.136),
        (168, -1.72, 19.51, 0.135),
        (180, -1.58, 20.14, 0.133),
        (192, -1.45, 20.72, 0.130),
        (204, -1.34, 21.25, 0.127),
        (216, -1.25, 21.71, 0.124),
        (228, -1.18, 22.10, 0.121),
        (240, -1.12, 22.43, 0.118),
    ],
    "female": [
        (24, -1.60, 16.42, 0.081),
        (36, -1.95, 15.88, 0.085),
        (48, -2.20, 15.50, 0.091),
        (60, -2.35, 15.28, 0.099),
        (72, -2.42, 15.28, 0.108),
        (84, -2.41, 15.52, 0.117),
        (96, -2.32, 15.93, 0.126),
        (108, -2.18, 16.46, 0.133),
        (120, -2.01, 17.08, 0.139),
        (132, -1.83, 17.77, 0.142),
        (144, -1.65, 18.49, 0.144),
        (156, -1.49, 19.22, 0.144),
        (168, -1.35, 19.92, 0.142),
        (180, -1.23, 20.56, 0.139),
        (192, -1.13, 21.12, 0.136),
        (204, -1.05, 21.60, 0.133),
        (216, -0.99, 21.98, 0.130),
        (228, -0.95, 22.27, 0.127),
        (240, -0.92, 22.48, 0.124),
    ],
}

# Weight-for-length anchors: (length_cm, L, M, S)
WFL_ANCHORS = {
    "male": [
        (45, -0.35, 2.44, 0.092),
        (50, -0.35, 3.35, 0.090),
        (55, -0.36, 4.47, 0.087),
        (60, -0.37, 5.67, 0.084),
        (65, -0.38, 6.88, 0.082),
        (70, -0.39, 8.05, 0.081),
        (75, -0.40, 9.15, 0.080),
        (80, -0.41, 10.19, 0.080),
        (85, -0.42, 11.22, 0.081),
        (90, -0.43, 12.31, 0.082),
        (95, -0.44, 13.52, 0.084),
        (100, -0.45, 14.85, 0.086),
        (103.5, -0.45, 15.84, 0.088),
    ],
    "female": [
        (45, -0.38, 2.40, 0.094),
        (50, -0.38, 3.27, 0.092),
        (55, -0.39, 4.34, 0.089),
        (60, -0.40, 5.51, 0.086),
        (65, -0.41, 6.67, 0.084),
        (70, -0.42, 7.80, 0.083),
        (75, -0.43, 8.87, 0.082),
        (80, -0.44, 9.91, 0.082),
        (85, -0.45, 10.95, 0.083),
        (90, -0.46, 12.05, 0.084),
        (95, -0.47, 13.28, 0.086),
        (100, -0.48, 14.65, 0.088),
        (103.5, -0.48, 15.67, 0.090),
    ],
}


def _interp_rows(metric, sex, anchors, grid):
    keys = np.array([a[0] for a in anchors], dtype=float)
    cols = [np.array([a[i] for a in anchors], dtype=float) for i in (1, 2, 3)]
    rows = []
    for k in grid:
        l, m, s = (float(np.round(np.interp(k, keys, c), 6)) for c in cols)
        rows.append(f"{metric}|{sex}|{float(k)}|{l}|{m}|{s}")
    return rows


def main():
    lines = ["# demonstration LMS reference table, regenerate with scripts/make_demo_lms.py"]
    for sex in ("female", "male"):
        lines += _interp_rows("bmi_for_age", sex, BMI_ANCHORS[sex], np.arange(24.0, 240.1, 3.0))
    for sex in ("female", "male"):
        lines += _interp_rows("weight_for_length", sex, WFL_ANCHORS[sex], np.arange(45.0, 103.6, 1.5))
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({len(lines) - 1} rows)")


if __name__ == "__main__":
    main()
