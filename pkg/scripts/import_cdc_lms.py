#!/usr/bin/env python3
"""Convert official CDC growth-chart CSV files into the pedrisk LMS format.

The CDC publishes the full LMS parameter files (e.g. bmiagerev.csv for
BMI-for-age 24-240 months and wtleninf.csv for weight-for-length) on its
growth-chart data page. Download them, then run:

    python scripts/import_cdc_lms.py --bmi bmiagerev.csv --wfl wtleninf.csv \
        --out lms_cdc.psv

and point the pipeline config's lms_path at the output. The CDC files use
Sex=1 for male, Sex=2 for female, and carry the key column first (Agemos or
Length), then L, M, S.
"""
import argparse
import csv
from pathlib import Path

SEX = {"1": "male", "2": "female"}


def convert(path, metric, out_rows):
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        fields = {name.lower(): name for name in reader.fieldnames or []}
        key_col = fields.get("agemos") or fields.get("length")
        if key_col is None:
            raise SystemExit(f"{path}: no Agemos/Length column found")
        for row in reader:
            sex = SEX.get(row[fields["sex"]].strip())
            if sex is None:
                continue
            key = float(row[key_col])
            l, m, s = (float(row[fields[c]]) for c in ("l", "m", "s"))
            out_rows.append((metric, sex, key, l, m, s))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bmi", help="CDC BMI-for-age LMS csv (bmiagerev.csv)")
    ap.add_argument("--wfl", help="CDC weight-for-length LMS csv (wtleninf.csv)")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    rows = []
    if args.bmi:
        convert(args.bmi, "bmi_for_age", rows)
    if args.wfl:
        convert(args.wfl, "weight_for_length", rows)
    if not rows:
        raise SystemExit("nothing to convert; pass --bmi and/or --wfl")

    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# imported from official CDC LMS files\n")
        for metric, sex, key, l, m, s in rows:
            fh.write(f"{metric}|{sex}|{key}|{l}|{m}|{s}\n")
    print(f"wrote {args.out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
