#!/usr/bin/env python3
"""Materialize MovieLens-100K as `u.data` / `u.user` under data/ml-100k/.

GroupLens hosts the canonical archive. When it is unreachable, the RecBole
wheel on PyPI ships an identical copy of the ratings and user tables in its
atomic-file format; this script converts those back to the original layout.
"""
import io
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "data", "ml-100k")
GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS, timeout=20) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    for name in ("u.data", "u.user"):
        with open(os.path.join(OUT, name), "wb") as fh:
            fh.write(archive.read(f"ml-100k/{name}"))


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-q", "-d", tmp]
        )
        wheel = next(os.path.join(tmp, f) for f in os.listdir(tmp) if f.endswith(".whl"))
        archive = zipfile.ZipFile(wheel)
        base = "recbole/dataset_example/ml-100k/ml-100k"
        inter = archive.read(base + ".inter").decode().splitlines()[1:]
        users = archive.read(base + ".user").decode().splitlines()[1:]
    with open(os.path.join(OUT, "u.data"), "w") as fh:
        for line in inter:
            u, i, r, t = line.split("\t")
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n")
    with open(os.path.join(OUT, "u.user"), "w") as fh:
        for line in users:
            fh.write("|".join(line.split("\t")) + "\n")


def main():
    os.makedirs(OUT, exist_ok=True)
    try:
        from_grouplens()
        print("fetched from grouplens", file=sys.stderr)
    except Exception as err:  # noqa: BLE001
        print(f"grouplens unavailable ({err}); using recbole mirror", file=sys.stderr)
        from_recbole()
    print(OUT)


if __name__ == "__main__":
    main()
