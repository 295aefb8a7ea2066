"""The tile file format, byte by byte.

One tile is a fixed header (magic, version, geometry, resolution), the
per-channel wavelength table, per-channel modality tags, and a channel-major
float32 payload. Round-trips are bit-exact; corrupt files fail loudly with
a distinct error per failure mode.

Run: python demos/05_tile_format.py
"""

import os
import struct
import tempfile

import numpy as np

from lessvit import data_io as dio

cfg = dio.SynthConfig(channels=4, height=32, width=32, mixing_rank=2, n_classes=2,
                      wavelengths=[490.0, 665.0, 842.0, 1610.0], n_radar=0)
cube, label = dio.generate_tile(cfg, seed=5)

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "tile.ght")
    dio.write_tile(cube, path)
    raw = open(path, "rb").read()

    print("== header walk ==")
    magic, version, c, h, w, res = struct.unpack_from("<4sHHIIf", raw, 0)
    print(f"  magic {magic!r}  version {version}  C={c} H={h} W={w}  "
          f"resolution {res} m/px")
    wl = np.frombuffer(raw, dtype="<f4", count=c, offset=20)
    tags = np.frombuffer(raw, dtype=np.uint8, count=c, offset=20 + 4 * c)
    print(f"  wavelengths {wl.tolist()} nm, modality tags {tags.tolist()}")
    payload = len(raw) - (20 + 5 * c)
    print(f"  payload {payload} bytes = {c}*{h}*{w}*4 = {c * h * w * 4}")

    print()
    print("== round trip is bit exact ==")
    again = dio.read_tile(path)
    second = os.path.join(tmp, "tile2.ght")
    dio.write_tile(again, second)
    print(f"  bytes equal after write/read/write: "
          f"{open(second, 'rb').read() == raw}")

    print()
    print("== corrupt files fail with distinct errors ==")
    for what, mutate, expected in [
        ("bad magic", lambda b: b"XXXX" + b[4:], dio.BadMagicError),
        ("wrong version", lambda b: b[:4] + b"\x63\x00" + b[6:], dio.VersionError),
        ("truncated payload", lambda b: b[:-8], dio.PayloadLengthError),
    ]:
        bad = os.path.join(tmp, "bad.ght")
        open(bad, "wb").write(mutate(raw))
        try:
            dio.read_tile(bad)
            print(f"  {what}: NOT caught (bug)")
        except expected as exc:
            print(f"  {what}: {type(exc).__name__}: {exc}")

    print()
    print("== the manifest is line-delimited key=value text ==")
    manifest = dio.generate_dataset(cfg, 4, tmp, seed=0)
    for line in open(manifest).read().splitlines():
        print("  " + line)
