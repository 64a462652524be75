#!/usr/bin/env python3
"""Convert univariate/multivariate .ts files (sktime/UEA format, equal length,
no timestamps) into the wide CSV layout read by `tandem`.

Usage: ts_to_wide_csv.py OUT.csv IN1.ts [IN2.ts ...]

Samples are numbered consecutively across the input files in the given order.
Class labels are remapped to 1..C following the @classLabel declaration order.
"""
import sys


def read_ts(path):
    labels, rows, in_data = [], [], False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if in_data:
                *channels, label = line.split(":")
                rows.append(([c.split(",") for c in channels], label))
            elif line.lower().startswith("@classlabel"):
                labels = line.split()[2:]
            elif line.lower() == "@data":
                in_data = True
    return labels, rows


def main():
    out, inputs = sys.argv[1], sys.argv[2:]
    class_ids, samples = {}, []
    for path in inputs:
        labels, rows = read_ts(path)
        for lab in labels:
            class_ids.setdefault(lab, len(class_ids) + 1)
        samples.extend(rows)
    length = max(len(ch) for chans, _ in samples for ch in chans)
    with open(out, "w") as fh:
        fh.write("sample_id,channel_id,label," + ",".join(f"v_{i + 1}" for i in range(length)) + "\n")
        for sid, (chans, lab) in enumerate(samples):
            for cid, values in enumerate(chans):
                fh.write(f"{sid},{cid},{class_ids[lab]}," + ",".join(values) + "\n")


if __name__ == "__main__":
    main()
