"""Image file IO: 8-bit PNG (via Pillow) and binary PPM.

Float images use [0, 1]; files store 8-bit channels.  Round-tripping is
quantized to 1/255 steps but bitwise deterministic.
"""

import numpy as np
from PIL import Image


def to_uint8(image):
    """Clamp a float image to [0, 1] and quantize to uint8 with round-half-even."""
    arr = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr):
    return np.asarray(arr, dtype=np.float64) / 255.0


def save_png(path, image):
    arr = to_uint8(image)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return from_uint8(arr)


def save_ppm(path, image):
    arr = to_uint8(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    h, w = arr.shape[0], arr.shape[1]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    # header is: magic, width, height, maxval, separated by whitespace/comments
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_uint8(data.reshape(h, w, 3))


def save_image(path, image):
    """Write PNG or PPM depending on the file extension."""
    p = str(path).lower()
    if p.endswith(".png"):
        save_png(path, image)
    elif p.endswith(".ppm"):
        save_ppm(path, image)
    else:
        raise ValueError(f"unsupported image extension: {path}")


def load_image(path):
    p = str(path).lower()
    if p.endswith(".png"):
        return load_png(path)
    if p.endswith(".ppm"):
        return load_ppm(path)
    raise ValueError(f"unsupported image extension: {path}")
