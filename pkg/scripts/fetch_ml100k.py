"""Fetch the MovieLens-100K ratings into data/ml-100k/u.data.

Tries the GroupLens archive first. Where that host is unreachable it falls
back to the copy of the ratings bundled in the ``recbole`` wheel on PyPI
(``ml-100k.inter``, same 100,000 rows with a header line).
"""

import argparse
import hashlib
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
MD5 = "6e47046882bad158b0efbb84cd5cb987"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        return zf.read("ml-100k/u.data")


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp,
                        "recbole==1.2.1"], check=True, stdout=subprocess.DEVNULL)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            text = zf.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
    return "".join(line + "\n" for line in text.splitlines()[1:] if line).encode()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "data" / "ml-100k")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        blob = from_grouplens()
    except OSError as exc:
        print(f"grouplens unavailable ({exc}); using the recbole wheel", file=sys.stderr)
        blob = from_recbole()
    digest = hashlib.md5(blob).hexdigest()
    if digest != MD5:
        print(f"warning: md5 {digest} differs from the expected {MD5}", file=sys.stderr)
    (out / "u.data").write_bytes(blob)
    rows = blob.count(b"\n")
    print(f"wrote {out / 'u.data'} ({rows} ratings)")


if __name__ == "__main__":
    main()
