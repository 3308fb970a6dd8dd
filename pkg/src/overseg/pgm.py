"""Binary PGM (P5) image reading and writing, 8-bit grayscale only."""

import numpy as np

from .errors import FormatError


def write_pgm(path_or_stream, image):
    """Write a uint8 2-D array as P5 with maxval 255."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    close = False
    if isinstance(path_or_stream, str):
        stream = open(path_or_stream, "wb")
        close = True
    else:
        stream = path_or_stream
    try:
        stream.write(header)
        stream.write(image.tobytes())
    finally:
        if close:
            stream.close()


def _read_tokens(data, count):
    """First `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset just past the single whitespace byte that
    terminates the last token), per the PNM header convention.
    """
    tokens = []
    pos = 0
    token = b""
    in_comment = False
    while pos < len(data):
        byte = data[pos:pos + 1]
        pos += 1
        if in_comment:
            if byte in b"\r\n":
                in_comment = False
            continue
        if byte == b"#" and not token:
            in_comment = True
            continue
        if byte.isspace():
            if token:
                tokens.append(token)
                token = b""
                if len(tokens) == count:
                    return tokens, pos
            continue
        token += byte
    raise FormatError("truncated header", offset=len(data))


def read_pgm(path_or_stream):
    """Parse a P5 file into a uint8 array; maxval must be <= 255."""
    close = False
    if isinstance(path_or_stream, str):
        stream = open(path_or_stream, "rb")
        close = True
    else:
        stream = path_or_stream
    try:
        data = stream.read()
    finally:
        if close:
            stream.close()

    if data[:2] != b"P5":
        raise FormatError(f"bad magic {data[:2]!r}, expected b'P5'", offset=0)
    tokens, offset = _read_tokens(data[2:], 3)
    offset += 2
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-integer header fields {tokens}",
                          offset=2) from None
    if w < 1 or h < 1:
        raise FormatError(f"invalid dimensions {w}x{h}", offset=2)
    if not 0 < maxval <= 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=2)
    need = w * h
    if len(data) - offset < need:
        raise FormatError(
            f"truncated pixel data: {len(data) - offset} bytes, need {need}",
            offset=len(data))
    if len(data) - offset > need:
        raise FormatError(
            f"{len(data) - offset - need} trailing bytes", offset=offset + need)
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    return pixels.reshape(h, w).copy()
