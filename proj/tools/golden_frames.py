#!/usr/bin/env python3
"""Writes tests/golden/frames.json: wire frames built without the C++ code.

Everything here (varints, column layout, key derivation, AEAD, CRC) is an
independent re-implementation, so the C++ test that replays these vectors is
a cross-check rather than a snapshot of itself.

    python3 tools/golden_frames.py > tests/golden/frames.json
"""

import hashlib
import json
import struct
import sys
import zlib

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

MASTER = bytes(range(32))


def varint(v):
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def zigzag(v):
    return (v << 1) ^ (v >> 63) if v >= 0 else ((v << 1) ^ -1) & 0xFFFFFFFFFFFFFFFF


def encode_batch(samples):
    base = samples[0]["t_ms"]
    out = bytearray(varint(base) + varint(len(samples)))
    for field in ("t_ms", "hr", "spo2", "rr", "temp"):
        prev = 0
        for i, s in enumerate(samples):
            v = s[field] - base if field == "t_ms" else s[field]
            out += varint(zigzag(v if i == 0 else v - prev))
            prev = v
    out += bytes(s["motion"] for s in samples)
    out += bytes(s["flags"] for s in samples)
    return bytes(out)


def encode_features(values):
    return varint(len(values)) + b"".join(struct.pack("<d", v) for v in values)


def device_key(device_id):
    return hashlib.blake2b(struct.pack("<Q", device_id), digest_size=32, key=MASTER).digest()


def frame(ftype, device_id, seq, nonce_ctr, plaintext):
    header = struct.pack("<BBBBQIIH", 0x4E, 0x57, 1, ftype, device_id, seq, nonce_ctr, len(plaintext))
    nonce = struct.pack("<QI", device_id, nonce_ctr)
    sealed = ChaCha20Poly1305(device_key(device_id)).encrypt(nonce, plaintext, header)
    body = header + sealed  # ciphertext || tag
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def sample(t, hr, spo2, rr, temp, motion=0, flags=0):
    return {"t_ms": t, "hr": hr, "spo2": spo2, "rr": rr, "temp": temp, "motion": motion, "flags": flags}


def main():
    t0 = 1_700_000_000_000
    cases = [
        {
            "name": "single_sample",
            "type": 1, "device_id": 1, "seq": 1, "nonce_ctr": 1,
            "samples": [sample(t0, 14000, 9700, 4500, 3680)],
        },
        {
            "name": "five_sample_batch",
            "type": 1, "device_id": 7, "seq": 42, "nonce_ctr": 42,
            "samples": [
                sample(t0 + 0, 14012, 9705, 4480, 3680, 3, 0),
                sample(t0 + 1000, 13990, 9698, 4530, 3681, 70, 0),
                sample(t0 + 2000, 14120, 9712, 4495, 3679, 200, 1),
                sample(t0 + 3250, 9050, 8510, 4400, 3662, 10, 2),
                sample(t0 + 4000, 14003, 9700, 4501, 3680, 0, 0),
            ],
        },
        {
            "name": "large_device_id",
            "type": 1, "device_id": 0x0123456789ABCDEF, "seq": 0xFFFFFFFE, "nonce_ctr": 0x80000001,
            "samples": [sample(5, 0, 10000, 20000, 2000), sample(6, 30000, 0, 0, 4500, 255, 3)],
        },
        {
            "name": "static_features",
            "type": 3, "device_id": 3, "seq": 9, "nonce_ctr": 9,
            "features": [29.5, 1.0, 2450.0, -0.25, 0.0, 3.75],
        },
        {
            "name": "advertise_empty",
            "type": 0, "device_id": 2, "seq": 1, "nonce_ctr": 1,
        },
    ]
    for c in cases:
        if "samples" in c:
            pt = encode_batch(c["samples"])
        elif "features" in c:
            pt = encode_features(c["features"])
        else:
            pt = b""
        c["plaintext_hex"] = pt.hex()
        c["frame_hex"] = frame(c["type"], c["device_id"], c["seq"], c["nonce_ctr"], pt).hex()
    json.dump({"master_key_hex": MASTER.hex(), "cases": cases}, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
