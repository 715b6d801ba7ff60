import hashlib
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from loguru import logger

LN10 = math.log(10.0)


def text_sha256(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_sha256(path, chunk_size=1 << 20):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def frame_signal(samples, frame_len, shift):
    num_frames = (len(samples) - frame_len) // shift + 1
    if num_frames < 1:
        return np.zeros((0, frame_len), dtype=np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(samples, frame_len)
    return np.array(windows[: (num_frames - 1) * shift + 1 : shift], dtype=np.float64)


def parallel_map(fn, items, jobs=1):
    """Order-preserving map; results come back in input order for any job count."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Running {len(items)} tasks on {jobs} workers")
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))

