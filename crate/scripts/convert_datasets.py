#!/usr/bin/env python3
"""Convert public benchmark sources into the CSV layout read by `wvad prepare`.

Each output row holds the feature columns followed by a 0/1 label column
(1 = anomaly). Only the standard library is used.

Sources (both available as Python wheels on PyPI, so `pip download` suffices):

  * Ionosphere: keel_ds wheel, file keel_ds/data/balanced/raw/ionosphere.dat
    (UCI Ionosphere, 351 rows, 33 attributes with the constant second UCI
    attribute already removed). The leading binary attribute is dropped as
    well, leaving the usual 32-dimensional outlier benchmark. Class `b`
    (bad radar returns, 126 rows) is the anomaly class.
  * Satellite: imbalanced_databases wheel, files
    imbalanced_databases/data/satimage/sat.trn.txt and sat.tst.txt
    (UCI Statlog Landsat Satellite, 4435 + 2000 rows, 36 attributes).
    The three smallest classes (2, 4, 5; 2036 rows) are the anomaly class.

Usage:
    pip download --no-deps -d wheels keel-ds imbalanced-databases
    python3 scripts/convert_datasets.py wheels data
"""

import glob
import os
import sys
import zipfile


def wheel(directory, prefix):
    matches = sorted(glob.glob(os.path.join(directory, prefix + "-*.whl")))
    if not matches:
        sys.exit(f"no {prefix} wheel in {directory}")
    return zipfile.ZipFile(matches[-1])


def write(path, rows):
    with open(path, "w") as out:
        for features, label in rows:
            out.write(",".join(features + [str(label)]) + "\n")
    print(f"{path}: {len(rows)} rows, {len(rows[0][0])} features, "
          f"{sum(l for _, l in rows)} anomalies")


def ionosphere(wheels):
    text = wheel(wheels, "keel_ds").read("keel_ds/data/balanced/raw/ionosphere.dat").decode()
    rows = []
    for line in text.splitlines():
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 34:
            continue
        rows.append((cells[1:33], 1 if cells[33] == "b" else 0))
    return rows


def satellite(wheels):
    z = wheel(wheels, "imbalanced_databases")
    rows = []
    for name in ("sat.trn.txt", "sat.tst.txt"):
        text = z.read("imbalanced_databases/data/satimage/" + name).decode()
        for line in text.splitlines():
            cells = line.split()
            if len(cells) != 37:
                continue
            rows.append((cells[:36], 1 if cells[36] in ("2", "4", "5") else 0))
    return rows


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    wheels, out = sys.argv[1], sys.argv[2]
    os.makedirs(out, exist_ok=True)
    write(os.path.join(out, "ionosphere.csv"), ionosphere(wheels))
    write(os.path.join(out, "satellite.csv"), satellite(wheels))


if __name__ == "__main__":
    main()
