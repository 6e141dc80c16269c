"""Convert UEA/UCR `.ts` archives into the directory layout read by the
`uea_archive` loader:

    <out>/<Name>/data/<instance_id>.txt   (T rows x F whitespace-separated columns)
    <out>/<Name>/labels.txt               (instance_id,label per line)

Instance ids are prefixed with `train_` / `test_` so the loader can recover
the archive's original train/test partition.

The archives are read from the sktime wheel (which bundles a handful of UEA
datasets); pass --wheel to use an already downloaded wheel, otherwise pip is
invoked to fetch it.
"""

import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

DEFAULT_DATASETS = ["BasicMotions", "GunPoint", "ArrowHead"]


def parse_ts(text):
    instances = []
    in_data = False
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if line.lower() == "@data":
                in_data = True
            continue
        *dims, label = line.split(":")
        channels = [[float(v) for v in d.split(",")] for d in dims]
        lengths = {len(c) for c in channels}
        if len(lengths) != 1:
            raise ValueError("ragged channels inside one instance")
        instances.append((channels, label.strip()))
    return instances


def write_split(out_dir, prefix, instances, labels_out):
    for i, (channels, label) in enumerate(instances):
        iid = f"{prefix}_{i:04d}"
        rows = zip(*channels)
        with open(os.path.join(out_dir, "data", iid + ".txt"), "w") as f:
            for row in rows:
                f.write(" ".join(repr(v) for v in row) + "\n")
        labels_out.append(f"{iid},{label}")


def fetch_wheel(tmp):
    subprocess.check_call(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "sktime"]
    )
    return glob.glob(os.path.join(tmp, "sktime-*.whl"))[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--wheel", default=None)
    ap.add_argument("datasets", nargs="*", default=DEFAULT_DATASETS)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        z = zipfile.ZipFile(wheel)
        for name in args.datasets:
            out_dir = os.path.join(args.out, name)
            os.makedirs(os.path.join(out_dir, "data"), exist_ok=True)
            labels = []
            for split in ("TRAIN", "TEST"):
                member = f"sktime/datasets/data/{name}/{name}_{split}.ts"
                instances = parse_ts(z.read(member).decode("utf-8", "replace"))
                write_split(out_dir, split.lower(), instances, labels)
            with open(os.path.join(out_dir, "labels.txt"), "w") as f:
                f.write("\n".join(labels) + "\n")
            print(f"{name}: {len(labels)} instances -> {out_dir}")


if __name__ == "__main__":
    main()
