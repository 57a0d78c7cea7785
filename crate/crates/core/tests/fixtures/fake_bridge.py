"""Minimal stand-in bridge for protocol tests.

Edits copy the coarse PNG verbatim, disparity is a constant PFM, noise is a
zero .npy. Special prompts trigger failure modes.
"""
import json
import shutil
import struct
import sys
import time

ALPHA_BARS = []
prod = 1.0
for i in range(1000):
    prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i / 999)
    ALPHA_BARS.append(prod)


def send(msg):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def png_size(path):
    with open(path, "rb") as f:
        head = f.read(24)
    return struct.unpack(">II", head[16:24])


def write_pfm(path, w, h, value):
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(struct.pack("<%df" % (w * h), *([value] * (w * h))))


def write_npy(path, shape):
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': (%s), }" % (
        "".join("%d, " % s for s in shape)
    )
    pad = 64 - (10 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    n = 1
    for s in shape:
        n *= s
    with open(path, "wb") as f:
        f.write(b"\x93NUMPY\x01\x00" + struct.pack("<H", len(header)) + header.encode())
        f.write(b"\x00" * (4 * n))


send({"kind": "hello", "alpha_bars": ALPHA_BARS, "model": "fake"})

for line in sys.stdin:
    req = json.loads(line)
    rid, kind = req["id"], req["kind"]
    params, inputs = req.get("params", {}), req.get("inputs", {})
    prompt = params.get("prompt", "")
    if prompt == "malformed":
        sys.stdout.write("{not json\n")
        sys.stdout.flush()
        continue
    if prompt == "hang":
        time.sleep(30)
        continue
    if prompt == "fail":
        send({"id": rid, "ok": False, "error": "model exploded"})
        continue
    if prompt == "escape":
        send({"id": rid, "ok": True, "outputs": {"image": "../outside.png"}})
        continue
    if kind == "echo":
        send({"id": rid, "ok": True, "outputs": {"payload": params.get("payload")}})
    elif kind == "edit":
        shutil.copyfile(inputs["coarse"], params["out"])
        send({"id": rid, "ok": True, "outputs": {"image": params["out"]}})
    elif kind == "disparity":
        w, h = png_size(inputs["image"])
        write_pfm(params["out"], w, h, 0.5)
        send({"id": rid, "ok": True, "outputs": {"disparity": params["out"]}})
    elif kind == "predict_noise":
        w, h = png_size(inputs["image"])
        write_npy(params["out"], (4, h // 8 or 1, w // 8 or 1))
        send({"id": rid, "ok": True, "outputs": {"noise": params["out"]}})
    else:
        send({"id": rid, "ok": False, "error": "unknown kind " + kind})
